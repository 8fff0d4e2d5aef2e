"""The base CNN classifier and its loss.

Each block is conv 3x3 (stride 2, "same" padding) -> ReLU -> batch norm;
the flattened output feeds a linear layer with one logit per class. New-class
slots come first, fixed classes (silence, unknown) occupy the tail.
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .autodiff import (ParamSet, Tensor, batch_norm, conv2d, conv_output_size, flatten,
                       linear, log_softmax, no_grad, one_hot, relu)

FIXED_CLASSES = ("silence", "unknown")


@dataclass
class ModelConfig:
    n_blocks: int = 4
    filters: int = 64
    kernel: int = 3
    stride: int = 2
    n_outputs: int = 12
    input_shape: Tuple[int, int] = (98, 40)
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if self.n_outputs < 2:
            raise ValueError("n_outputs must be >= 2")
        if self.n_blocks < 1 or self.filters < 1 or self.kernel < 1 or self.stride < 1:
            raise ValueError("n_blocks, filters, kernel and stride must be positive")

    def feature_shape(self) -> Tuple[int, int]:
        """Spatial size after the last block."""
        h, w = self.input_shape
        for _ in range(self.n_blocks):
            h = conv_output_size(h, self.kernel, self.stride, "same")
            w = conv_output_size(w, self.kernel, self.stride, "same")
        return h, w

    @property
    def flat_size(self) -> int:
        h, w = self.feature_shape()
        return h * w * self.filters

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass
class OutputLayout:
    """Slot assignment: new classes at 0..N-1, fixed classes at N..N+M-1."""

    n_new: int
    fixed: Tuple[str, ...] = FIXED_CLASSES

    @property
    def n_fixed(self) -> int:
        return len(self.fixed)

    @property
    def n_outputs(self) -> int:
        return self.n_new + self.n_fixed

    @property
    def new_class_slots(self) -> List[int]:
        return list(range(self.n_new))

    @property
    def fixed_class_slots(self) -> Dict[str, int]:
        return {name: self.n_new + i for i, name in enumerate(self.fixed)}

    def slot(self, fixed_name: str) -> int:
        return self.fixed_class_slots[fixed_name]


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    """He-uniform weights, zero biases, unit batch-norm scale and zero shift."""
    params: ParamSet = {}
    in_ch = 1
    k = cfg.kernel
    for i in range(cfg.n_blocks):
        fan_in = k * k * in_ch
        bound = np.sqrt(6.0 / fan_in)
        params[f"conv{i}.weight"] = rng.uniform(-bound, bound, size=(k, k, in_ch, cfg.filters))
        params[f"conv{i}.bias"] = np.zeros(cfg.filters)
        params[f"bn{i}.gamma"] = np.ones(cfg.filters)
        params[f"bn{i}.beta"] = np.zeros(cfg.filters)
        in_ch = cfg.filters
    bound = np.sqrt(6.0 / cfg.flat_size)
    params["fc.weight"] = rng.uniform(-bound, bound, size=(cfg.flat_size, cfg.n_outputs))
    params["fc.bias"] = np.zeros(cfg.n_outputs)
    return {name: Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=name)
            for name, v in params.items()}


def forward(params: ParamSet, batch, cfg: ModelConfig) -> Tensor:
    """Logits of shape (B, n_outputs) for a (B, T, D) stack of feature maps.

    Batch norm always uses the statistics of ``batch`` itself.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=params["fc.weight"].dtype))
    if x.ndim != 3 or x.shape[0] < 1 or tuple(x.shape[1:]) != cfg.input_shape:
        raise ValueError(f"forward: expected (B, {cfg.input_shape[0]}, {cfg.input_shape[1]}) input, got {x.shape}")
    h = x.reshape(x.shape[0], x.shape[1], x.shape[2], 1)
    for i in range(cfg.n_blocks):
        h = conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"],
                   stride=cfg.stride, padding="same")
        h = relu(h)
        h = batch_norm(h, params[f"bn{i}.gamma"], params[f"bn{i}.beta"], eps=cfg.bn_eps)
    return linear(flatten(h), params["fc.weight"], params["fc.bias"])


def cross_entropy(logits: Tensor, labels: Sequence[int], reduction: str = "sum") -> Tensor:
    """-sum_j log softmax(logits_j)[y_j]; ``reduction="mean"`` divides by the count."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.size != n:
        raise ValueError(f"cross_entropy: {labels.size} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: label out of range [0, {c})")
    target = Tensor(one_hot(labels, c, dtype=logits.dtype))
    total = -(log_softmax(logits) * target).sum()
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total * (1.0 / n)
    raise ValueError(f"unknown reduction {reduction!r}")


def predict(params: ParamSet, features: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Argmax class per row (ties resolve to the lowest index)."""
    with no_grad():
        logits = forward(params, features, cfg).data
    return np.argmax(logits, axis=1)
