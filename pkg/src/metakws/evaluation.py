"""Repeated fine-tune/evaluate trials, accuracy reports and shot sweeps."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .autodiff import ParamSet, no_grad
from .dataset import ExampleStore, SplitManifest
from .episodes import EpisodeConfig, build_target_task
from .meta_learn import TrainConfig, fine_tune, train_supervised
from .model import ModelConfig, forward

METHOD_NAMES = {"supervised": "Superv. L.", "original": "MAML-ori", "extended": "MAML-ext"}
PROTOCOL_NOTE = ("each trial resamples the K-shot support, the silence clips and the unknown "
                 "clips; the user-keyword eval pool is fixed by the manifest")


@dataclass
class TrialResult:
    seed: int
    accuracy: float
    confusion: np.ndarray
    support_size: int = 0


@dataclass
class EvalReport:
    variant: str
    k_shot: int
    n_trials: int
    base_seed: int
    accuracies: List[float]
    mean: float
    ci95: float
    confusion: List[List[int]]
    class_names: List[str]
    support_size: int = 0
    notes: Dict[str, str] = field(default_factory=dict)

    @property
    def method(self) -> str:
        return METHOD_NAMES.get(self.variant, self.variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method
        return d

    def save_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load_json(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        d.pop("method", None)
        return cls(**d)

    def csv_row(self) -> List[str]:
        return [self.method, str(self.k_shot), f"{100 * self.mean:.2f}", f"{100 * self.ci95:.2f}"]


CSV_HEADER = ["method", "K", "mean", "ci95"]


def ci95_halfwidth(values: Sequence[float]) -> float:
    """1.96 * sample standard deviation / sqrt(n); 0 for fewer than two values."""
    n = len(values)
    if n < 2:
        return 0.0
    return 1.96 * float(np.std(values, ddof=1)) / math.sqrt(n)


def summarize(variant: str, k_shot: int, trials: Sequence[TrialResult], base_seed: int,
              class_names: Sequence[str]) -> EvalReport:
    accs = [t.accuracy for t in sorted(trials, key=lambda t: t.seed)]
    confusion = sum(t.confusion for t in trials)
    return EvalReport(variant=variant, k_shot=k_shot, n_trials=len(accs), base_seed=base_seed,
                      accuracies=accs, mean=float(np.mean(accs)), ci95=ci95_halfwidth(accs),
                      confusion=np.asarray(confusion).astype(int).tolist(),
                      class_names=list(class_names),
                      support_size=max((t.support_size for t in trials), default=0),
                      notes={"protocol": PROTOCOL_NOTE, "ci": "normal approximation, mean +/- 1.96 SEM"})


def predict_query(params: ParamSet, x: np.ndarray, model_cfg: ModelConfig, order: np.ndarray,
                  batch: int) -> np.ndarray:
    """Predictions for ``x`` evaluated in shuffled chunks of ``batch`` (batch
    norm uses each chunk's statistics)."""
    preds = np.empty(len(x), dtype=np.int64)
    with no_grad():
        for i in range(0, len(order), batch):
            idx = order[i : i + batch]
            preds[idx] = np.argmax(forward(params, x[idx], model_cfg).data, axis=1)
    return preds


def class_names_for(manifest: SplitManifest, episode_cfg: EpisodeConfig) -> List[str]:
    names = sorted(manifest.partition.user_keywords)
    return names + ["silence", "unknown"][: episode_cfg.n_fixed]


def run_trial(params: Optional[ParamSet], manifest: SplitManifest, store: ExampleStore,
              episode_cfg: EpisodeConfig, train_cfg: TrainConfig, model_cfg: ModelConfig,
              seed: int) -> TrialResult:
    """Build the target task for ``seed``, adapt, and score the query by argmax.

    ``params`` is the meta-learned initializer; it is ignored by the
    supervised variant, which trains from scratch on the support.
    """
    rng = np.random.default_rng(seed)
    task = build_target_task(manifest.partition, manifest, episode_cfg, rng, store, seed=seed)
    xs, ys = task.support_arrays(store)
    if episode_cfg.variant == "supervised":
        adapted = train_supervised(xs, ys, train_cfg, model_cfg,
                                   np.random.default_rng(np.random.SeedSequence([seed, 1])))
    else:
        forbidden = ()
        if episode_cfg.variant == "extended":
            forbidden = tuple(range(episode_cfg.n_new, episode_cfg.n_way))
        adapted = fine_tune(params, xs, ys, train_cfg, model_cfg, forbidden_labels=forbidden)
    xq, yq = task.query_arrays(store)
    order = rng.permutation(len(yq))
    preds = predict_query(adapted, xq, model_cfg, order, max(train_cfg.eval_batch, 2))
    n = model_cfg.n_outputs
    confusion = np.zeros((n, n), dtype=np.int64)
    np.add.at(confusion, (yq, preds), 1)
    return TrialResult(seed=seed, accuracy=float(np.mean(preds == yq)), confusion=confusion,
                       support_size=len(ys))


def run_eval(params: Optional[ParamSet], manifest: SplitManifest, store: ExampleStore,
             episode_cfg: EpisodeConfig, train_cfg: TrainConfig, model_cfg: ModelConfig,
             n_trials: int = 100, base_seed: int = 0,
             progress: Optional[Callable[[TrialResult], None]] = None) -> EvalReport:
    """``n_trials`` trials with seeds ``base_seed .. base_seed + n_trials - 1``."""
    trials = []
    for seed in range(base_seed, base_seed + n_trials):
        t = run_trial(params, manifest, store, episode_cfg, train_cfg, model_cfg, seed)
        trials.append(t)
        if progress is not None:
            progress(t)
    return summarize(episode_cfg.variant, episode_cfg.k_shot, trials, base_seed,
                     class_names_for(manifest, episode_cfg))


def write_table(reports: Sequence[EvalReport], path) -> Path:
    """Table-style CSV (method, K, mean, ci95), accuracies in percent."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())
    return path


def write_plot_data(reports: Sequence[EvalReport], path) -> Path:
    """Accuracy-vs-shot series: K, mean, ci95 (percent), variant."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K", "mean", "ci95", "variant"])
        for r in sorted(reports, key=lambda r: (r.variant, r.k_shot)):
            w.writerow([r.k_shot, f"{100 * r.mean:.2f}", f"{100 * r.ci95:.2f}", r.variant])
    return path


DEFAULT_SHOTS = (1, 5, 10, 15, 20, 30, 50, 100)
ParamsForShot = Union[ParamSet, Callable[[int], ParamSet], None]


def shot_sweep(params: ParamsForShot, manifest: SplitManifest, store: ExampleStore,
               episode_cfg: EpisodeConfig, train_cfg: TrainConfig, model_cfg: ModelConfig,
               k_list: Sequence[int] = DEFAULT_SHOTS, n_trials: int = 100,
               base_seed: int = 0) -> List[EvalReport]:
    """One report per K. ``params`` is a fixed initializer or a callable
    ``k -> initializer`` (e.g. meta-training per shot count)."""
    reports = []
    for k in k_list:
        cfg = EpisodeConfig(**{**asdict(episode_cfg), "k_shot": int(k)})
        theta = params(int(k)) if callable(params) else params
        reports.append(run_eval(theta, manifest, store, cfg, train_cfg, model_cfg,
                                n_trials=n_trials, base_seed=base_seed))
    return reports
