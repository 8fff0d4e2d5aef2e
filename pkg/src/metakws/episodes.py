"""Episodic task sampling for meta-training and the target (fine-tune/evaluate) task.

Items are ``(source, label)`` pairs where ``source`` is a corpus-relative WAV
path or a silence descriptor; :class:`~metakws.dataset.ExampleStore` turns
them into feature maps.
"""

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import ClassPartition, ExampleStore, SplitManifest, silence_source

VARIANTS = ("extended", "original", "supervised")
SILENCE, UNKNOWN = "silence", "unknown"

Item = Tuple[str, int]


class EpisodeError(ValueError):
    pass


@dataclass
class EpisodeConfig:
    n_new: int = 10
    n_fixed: int = 2
    k_shot: int = 5
    query_per_class: int = 15
    eval_per_class: int = 100
    variant: str = "extended"
    silence_gain: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.silence_gain = tuple(self.silence_gain)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_new < 1 or self.k_shot < 1:
            raise ValueError("n_new and k_shot must be >= 1")
        if self.n_fixed not in (0, 2):
            raise ValueError("n_fixed must be 0 or 2 (silence, unknown)")

    @property
    def n_way(self) -> int:
        return self.n_new + self.n_fixed


@dataclass
class MetaTask:
    support: List[Item]
    query: List[Item]
    keyword_map: Dict[str, int]
    class_slots: Dict[str, int] = field(default_factory=dict)
    variant: str = "extended"
    seed: Optional[int] = None

    def support_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.support], dtype=np.int64)

    def query_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.query], dtype=np.int64)

    def support_arrays(self, store: ExampleStore) -> Tuple[np.ndarray, np.ndarray]:
        return store.stack([s for s, _ in self.support]), self.support_labels()

    def query_arrays(self, store: ExampleStore) -> Tuple[np.ndarray, np.ndarray]:
        return store.stack([s for s, _ in self.query]), self.query_labels()

    def to_dict(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "keyword_map": self.keyword_map,
                "class_slots": self.class_slots,
                "support": [list(it) for it in self.support],
                "query": [list(it) for it in self.query]}


def _draw_silence(partition: ClassPartition, store: ExampleStore, n: int,
                  rng: np.random.Generator, gain: Tuple[float, float]) -> List[str]:
    if n and not partition.silence_sources:
        raise EpisodeError("no background-noise sources for the silence class")
    out = []
    for _ in range(n):
        rel = partition.silence_sources[int(rng.integers(len(partition.silence_sources)))]
        noise_len = len(store.noise(rel))
        if noise_len < 16000:
            raise EpisodeError(f"noise source {rel} is shorter than one second")
        start = int(rng.integers(0, noise_len - 16000 + 1))
        out.append(silence_source(rel, start, float(rng.uniform(gain[0], gain[1]))))
    return out


def _draw_unknown(partition: ClassPartition, manifest: SplitManifest, n: int,
                  rng: np.random.Generator, exclude: Iterable[str] = ()) -> List[str]:
    """``n`` distinct files, keyword chosen uniformly then file uniformly."""
    exclude = set(exclude)
    pools = {kw: [f for f in manifest.files("meta_train", kw) if f not in exclude]
             for kw in partition.unknown_keywords}
    if sum(len(p) for p in pools.values()) < n:
        raise EpisodeError(f"not enough unknown-class files for {n} examples")
    chosen: List[str] = []
    taken = set()
    keys = sorted(pools)
    while len(chosen) < n:
        kw = keys[int(rng.integers(len(keys)))]
        avail = [f for f in pools[kw] if f not in taken]
        if not avail:
            keys.remove(kw)
            continue
        f = avail[int(rng.integers(len(avail)))]
        taken.add(f)
        chosen.append(f)
    return chosen


def _sample_files(files: Sequence[str], n: int, rng: np.random.Generator, what: str) -> List[str]:
    if len(files) < n:
        raise EpisodeError(f"{what}: need {n} files, have {len(files)}")
    idx = rng.choice(len(files), size=n, replace=False)
    return [files[i] for i in idx]


def sample_meta_task(partition: ClassPartition, manifest: SplitManifest, cfg: EpisodeConfig,
                     rng: np.random.Generator, store: ExampleStore, seed: Optional[int] = None) -> MetaTask:
    """One meta-training task.

    extended: N training keywords in randomly permuted slots 0..N-1; support
    holds K clips per keyword only; query holds Q clips per keyword plus Q
    silence (slot N) and Q unknown (slot N+1).
    original: silence and unknown are ordinary classes, present in support
    and query, and all N+M slots are permuted.
    """
    if cfg.variant == "supervised":
        raise EpisodeError("the supervised baseline does not meta-train")
    n, k, q = cfg.n_new, cfg.k_shot, cfg.query_per_class
    training = list(partition.training_keywords)
    if n > len(training):
        raise EpisodeError(f"N={n} exceeds the {len(training)} training keywords")
    picked = [training[i] for i in rng.choice(len(training), size=n, replace=False)]
    fixed = [SILENCE, UNKNOWN][: cfg.n_fixed]
    if cfg.variant == "extended":
        perm = rng.permutation(n)
        slots = {kw: int(perm[i]) for i, kw in enumerate(picked)}
        slots.update({name: n + j for j, name in enumerate(fixed)})
    else:
        perm = rng.permutation(n + len(fixed))
        slots = {name: int(perm[i]) for i, name in enumerate(picked + fixed)}

    support: List[Item] = []
    query: List[Item] = []
    for kw in picked:
        files = _sample_files(manifest.files("meta_train", kw), k + q, rng, kw)
        support += [(f, slots[kw]) for f in files[:k]]
        query += [(f, slots[kw]) for f in files[k:]]
    if fixed:
        n_sup = k if cfg.variant == "original" else 0
        sil = _draw_silence(partition, store, n_sup + q, rng, cfg.silence_gain)
        unk = _draw_unknown(partition, manifest, n_sup + q, rng)
        support += [(s, slots[SILENCE]) for s in sil[:n_sup]] + [(u, slots[UNKNOWN]) for u in unk[:n_sup]]
        query += [(s, slots[SILENCE]) for s in sil[n_sup:]] + [(u, slots[UNKNOWN]) for u in unk[n_sup:]]
    return MetaTask(support=support, query=query,
                    keyword_map={kw: slots[kw] for kw in picked}, class_slots=slots,
                    variant=cfg.variant, seed=seed)


def build_target_task(partition: ClassPartition, manifest: SplitManifest, cfg: EpisodeConfig,
                      rng: np.random.Generator, store: ExampleStore,
                      seed: Optional[int] = None) -> MetaTask:
    """The user-facing task: K fine-tuning clips per user keyword, evaluated on
    the fixed eval pool plus the same number of silence and unknown clips.

    User keywords take slots 0..N-1 in alphabetical order, silence N,
    unknown N+1. The extended variant's support has no fixed-class items;
    the original-MAML and supervised baselines also get K silence and K
    unknown clips.
    """
    users = sorted(partition.user_keywords)
    if len(users) != cfg.n_new:
        raise EpisodeError(f"partition has {len(users)} user keywords, config expects {cfg.n_new}")
    fixed = [SILENCE, UNKNOWN][: cfg.n_fixed]
    slots = {kw: i for i, kw in enumerate(users)}
    slots.update({name: len(users) + j for j, name in enumerate(fixed)})
    k, e = cfg.k_shot, cfg.eval_per_class

    support: List[Item] = []
    query: List[Item] = []
    for kw in users:
        pool = manifest.files("finetune_pool", kw)
        if len(pool) < k:
            raise EpisodeError(f"fine-tune pool of {kw!r} has {len(pool)} clips, K={k}")
        support += [(f, slots[kw]) for f in _sample_files(pool, k, rng, kw)]
        evals = manifest.files("eval_pool", kw)
        if len(evals) < e:
            raise EpisodeError(f"eval pool of {kw!r} has {len(evals)} clips, need {e}")
        query += [(f, slots[kw]) for f in evals[:e]]
    if fixed:
        n_sup = 0 if cfg.variant == "extended" else k
        sil = _draw_silence(partition, store, n_sup + e, rng, cfg.silence_gain)
        unk = _draw_unknown(partition, manifest, n_sup + e, rng)
        support += [(s, slots[SILENCE]) for s in sil[:n_sup]] + [(u, slots[UNKNOWN]) for u in unk[:n_sup]]
        query += [(s, slots[SILENCE]) for s in sil[n_sup:]] + [(u, slots[UNKNOWN]) for u in unk[n_sup:]]
    return MetaTask(support=support, query=query,
                    keyword_map={kw: slots[kw] for kw in users}, class_slots=slots,
                    variant=cfg.variant, seed=seed)


def dump_tasks(tasks: Iterable[MetaTask], path) -> None:
    """JSON lines, one task per line."""
    with open(path, "w") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


def load_tasks(path) -> List[MetaTask]:
    tasks = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            tasks.append(MetaTask(support=[tuple(x) for x in d["support"]],
                                  query=[tuple(x) for x in d["query"]],
                                  keyword_map=d["keyword_map"], class_slots=d["class_slots"],
                                  variant=d["variant"], seed=d["seed"]))
    return tasks
