"""Inner adaptation, the second-order meta update, fine-tuning and trainers."""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ParamSet, Tensor, detach, grad, no_grad, save_params
from .dataset import ExampleStore, SplitManifest
from .episodes import EpisodeConfig, sample_meta_task
from .model import ModelConfig, cross_entropy, forward, init_params

log = logging.getLogger(__name__)

TaskArrays = Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
LossFn = Callable[[ParamSet], Tensor]
LossTask = Tuple[LossFn, LossFn]


class DivergenceError(RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None,
                 iteration: Optional[int] = None, task_seed: Optional[int] = None):
        self.step = step
        self.iteration = iteration
        self.task_seed = task_seed
        super().__init__(message)


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.001
    inner_steps: int = 5
    finetune_steps: int = 10
    meta_batch: int = 16
    meta_iterations: int = 1000
    first_order: bool = False
    loss_reduction: str = "sum"
    task_aggregation: str = "sum"
    outer_optimizer: str = "sgd"
    checkpoint_every: int = 0
    divergence_limit: float = 1e4
    supervised_steps: int = 500
    supervised_batch: int = 32
    eval_batch: int = 100

    def __post_init__(self):
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("alpha must be >= 0 and beta > 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")
        if self.task_aggregation not in ("sum", "mean"):
            raise ValueError("task_aggregation must be 'sum' or 'mean'")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise ValueError("outer_optimizer must be 'sgd' or 'adam'")

    def to_dict(self) -> dict:
        return asdict(self)


def meta_batch_for_shot(k_shot: int) -> int:
    """Tasks per outer update: 16 up to 30-shot, 4 for 50 and 100-shot."""
    return 4 if k_shot >= 50 else 16


def _check_loss(loss: Tensor, limit: float, step: int) -> float:
    value = float(loss.data)
    if not math.isfinite(value) or value > limit:
        raise DivergenceError(f"loss {value:.6g} at inner step {step}", step=step)
    return value


def support_loss(params: ParamSet, x: np.ndarray, y: np.ndarray, model_cfg: ModelConfig,
                 reduction: str = "sum") -> Tensor:
    return cross_entropy(forward(params, x, model_cfg), y, reduction=reduction)


def adapt(theta: ParamSet, loss_fn: LossFn, cfg: TrainConfig, create_graph: bool = False,
          steps: Optional[int] = None) -> ParamSet:
    """Repeated ``theta <- theta - alpha * grad loss_fn(theta)``.

    With ``create_graph`` the result stays connected to ``theta`` through the
    full second-order chain. Without it, and when ``theta`` requires grad,
    the result still depends on ``theta`` by identity (first-order MAML).
    """
    steps = cfg.inner_steps if steps is None else steps
    params = theta
    for step in range(steps):
        loss = loss_fn(params)
        _check_loss(loss, cfg.divergence_limit, step)
        g = grad(loss, params, create_graph=create_graph)
        params = {k: params[k] - cfg.alpha * g[k] for k in params}
    return params


def inner_adapt(theta: ParamSet, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                model_cfg: ModelConfig, create_graph: bool = False,
                steps: Optional[int] = None) -> ParamSet:
    """:func:`adapt` on the support cross-entropy of the model."""
    if len(y) == 0:
        raise ValueError("empty support set")
    return adapt(theta, lambda p: support_loss(p, x, y, model_cfg, cfg.loss_reduction), cfg,
                 create_graph=create_graph, steps=steps)


class Adam:
    """Outer-loop Adam; off by default (plain gradient descent is the reference update)."""

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, values: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            out[k] = (values[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(values[k].dtype)
        return out


def meta_gradient_losses(theta: ParamSet, tasks: Sequence[LossTask],
                         cfg: TrainConfig) -> Tuple[Dict[str, np.ndarray], float]:
    """Gradient of sum_i L_Qi(adapt(theta, L_Si)) w.r.t. ``theta``, task by task.

    Each task is a ``(support_loss_fn, query_loss_fn)`` pair of functions
    from a parameter set to a scalar tensor.
    """
    leaves = detach(theta)
    total = {k: np.zeros_like(v.data) for k, v in leaves.items()}
    meta_loss = 0.0
    for i, (support_fn, query_fn) in enumerate(tasks):
        adapted = adapt(leaves, support_fn, cfg, create_graph=not cfg.first_order)
        lq = query_fn(adapted)
        value = float(lq.data)
        if not math.isfinite(value) or value > cfg.divergence_limit:
            raise DivergenceError(f"query loss {value:.6g} on task {i}", step=cfg.inner_steps)
        g = grad(lq, leaves)
        for k in total:
            total[k] += g[k].data
        meta_loss += value
    if cfg.task_aggregation == "mean" and tasks:
        scale = 1.0 / len(tasks)
        total = {k: v * scale for k, v in total.items()}
        meta_loss *= scale
    return total, meta_loss


def _loss_tasks(tasks: Sequence[TaskArrays], cfg: TrainConfig, model_cfg: ModelConfig) -> List[LossTask]:
    out = []
    for xs, ys, xq, yq in tasks:
        if len(ys) == 0:
            raise ValueError("empty support set")
        out.append((lambda p, xs=xs, ys=ys: support_loss(p, xs, ys, model_cfg, cfg.loss_reduction),
                    lambda p, xq=xq, yq=yq: support_loss(p, xq, yq, model_cfg, cfg.loss_reduction)))
    return out


def meta_gradient(theta: ParamSet, tasks: Sequence[TaskArrays], cfg: TrainConfig,
                  model_cfg: ModelConfig) -> Tuple[Dict[str, np.ndarray], float]:
    """:func:`meta_gradient_losses` for model tasks ``(x_s, y_s, x_q, y_q)``."""
    return meta_gradient_losses(theta, _loss_tasks(tasks, cfg, model_cfg), cfg)


def apply_update(theta: ParamSet, g: Dict[str, np.ndarray], cfg: TrainConfig,
                 optimizer: Optional[Adam] = None) -> ParamSet:
    values = {k: v.data for k, v in theta.items()}
    if optimizer is not None:
        new = optimizer.step(values, g)
    else:
        new = {k: (values[k] - cfg.beta * g[k]).astype(values[k].dtype) for k in values}
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in new.items()}


def meta_step_losses(theta: ParamSet, tasks: Sequence[LossTask], cfg: TrainConfig,
                     optimizer: Optional[Adam] = None) -> Tuple[ParamSet, float]:
    g, meta_loss = meta_gradient_losses(theta, tasks, cfg)
    return apply_update(theta, g, cfg, optimizer), meta_loss


def meta_step(theta: ParamSet, tasks: Sequence[TaskArrays], cfg: TrainConfig,
              model_cfg: ModelConfig, optimizer: Optional[Adam] = None) -> Tuple[ParamSet, float]:
    """One outer update: ``theta - beta * grad_theta sum_i L_Qi(f_{theta'_i})``."""
    g, meta_loss = meta_gradient(theta, tasks, cfg, model_cfg)
    return apply_update(theta, g, cfg, optimizer), meta_loss


def task_seed(seed: int, iteration: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, iteration, index]).generate_state(1)[0])


@dataclass
class MetaTrainResult:
    params: ParamSet
    log: List[dict] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def meta_train(manifest: SplitManifest, store: ExampleStore, cfg: TrainConfig,
               model_cfg: ModelConfig, episode_cfg: EpisodeConfig, seed: int,
               out_dir=None, init: Optional[ParamSet] = None,
               progress: Optional[Callable[[dict], None]] = None) -> MetaTrainResult:
    """Sample meta-batches and apply :func:`meta_step` ``cfg.meta_iterations`` times.

    Checkpoints ``ckpt_<iter>`` go to ``out_dir`` every ``checkpoint_every``
    iterations and after the last one.
    """
    if init is None:
        init = init_params(model_cfg, np.random.default_rng(np.random.SeedSequence([seed, 0])))
    theta = detach(init)
    optimizer = Adam(cfg.beta) if cfg.outer_optimizer == "adam" else None
    result = MetaTrainResult(params=theta)
    out_dir = Path(out_dir) if out_dir is not None else None
    for it in range(1, cfg.meta_iterations + 1):
        t0 = time.perf_counter()
        seeds = [task_seed(seed, it, b) for b in range(cfg.meta_batch)]
        tasks = []
        for s in seeds:
            task = sample_meta_task(manifest.partition, manifest, episode_cfg,
                                    np.random.default_rng(s), store, seed=s)
            tasks.append(task.support_arrays(store) + task.query_arrays(store))
        try:
            theta, meta_loss = meta_step(theta, tasks, cfg, model_cfg, optimizer)
        except DivergenceError as exc:
            raise DivergenceError(f"iteration {it}: {exc} (task seeds {seeds})", step=exc.step,
                                  iteration=it, task_seed=seeds[0]) from None
        row = {"iteration": it, "meta_loss": meta_loss,
               "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
        result.log.append(row)
        if progress is not None:
            progress(row)
        if out_dir is not None and (it == cfg.meta_iterations or
                                    (cfg.checkpoint_every and it % cfg.checkpoint_every == 0)):
            result.checkpoints.append(save_params(theta, out_dir / f"ckpt_{it}"))
    result.params = theta
    return result


def write_log(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "meta_loss", "wall_ms"])
        for r in rows:
            w.writerow([r["iteration"], repr(float(r["meta_loss"])), r["wall_ms"]])
    return path


def fine_tune(theta: ParamSet, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
              model_cfg: ModelConfig, forbidden_labels: Sequence[int] = ()) -> ParamSet:
    """``finetune_steps`` plain gradient steps at rate ``alpha`` on the target support.

    ``forbidden_labels`` lists slots that must not occur in the support (the
    fixed classes, for the extended variant).
    """
    if forbidden_labels and np.isin(y, list(forbidden_labels)).any():
        raise ValueError("fine-tuning support contains fixed-class examples")
    params = detach(theta)
    for step in range(cfg.finetune_steps):
        loss = support_loss(params, x, y, model_cfg, cfg.loss_reduction)
        _check_loss(loss, cfg.divergence_limit, step)
        g = grad(loss, params)
        params = {k: Tensor(params[k].data - cfg.alpha * g[k].data, requires_grad=True, name=k)
                  for k in params}
    return params


def train_supervised(x: np.ndarray, y: np.ndarray, cfg: TrainConfig, model_cfg: ModelConfig,
                     rng: np.random.Generator) -> ParamSet:
    """Train from random initialization on the target support only, with
    shuffled mini-batches for ``supervised_steps`` steps at rate ``alpha``."""
    params = init_params(model_cfg, rng)
    n = len(y)
    batch = min(cfg.supervised_batch, n)
    order = rng.permutation(n)
    pos = 0
    for step in range(cfg.supervised_steps):
        if pos + batch > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos : pos + batch]
        pos += batch
        loss = support_loss(params, x[idx], y[idx], model_cfg, cfg.loss_reduction)
        _check_loss(loss, cfg.divergence_limit, step)
        g = grad(loss, params)
        params = {k: Tensor(params[k].data - cfg.alpha * g[k].data, requires_grad=True, name=k)
                  for k in params}
    return params


def accuracy(params: ParamSet, x: np.ndarray, y: np.ndarray, model_cfg: ModelConfig,
             batch: int = 100) -> float:
    with no_grad():
        preds = np.concatenate([np.argmax(forward(params, x[i : i + batch], model_cfg).data, axis=1)
                                for i in range(0, len(y), batch)])
    return float(np.mean(preds == y))
