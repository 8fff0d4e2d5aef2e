"""Corpus indexing, class partitioning, split manifests and the feature cache."""

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .audio import (AudioClip, FrontendConfig, decode_wav, load_wav, mfcc,
                    render_silence)

KEYWORDS_V2 = (
    "backward", "bed", "bird", "cat", "dog", "down", "eight", "five", "follow",
    "forward", "four", "go", "happy", "house", "learn", "left", "marvin", "nine",
    "no", "off", "on", "one", "right", "seven", "sheila", "six", "stop", "three",
    "tree", "two", "up", "visual", "wow", "yes", "zero",
)
NOISE_DIR = "_background_noise_"
PRESETS = {
    "digits": ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"),
    "commands": ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"),
}
N_UNKNOWN = 5
SPLITS = ("meta_train", "finetune_pool", "eval_pool")


class CorpusError(ValueError):
    pass


@dataclass
class CorpusIndex:
    root: Path
    keywords: Dict[str, List[str]]
    silence_sources: List[str]

    def __len__(self):
        return len(self.keywords)


def scan_corpus(root) -> CorpusIndex:
    """Index a Speech-Commands-layout tree: ``<keyword>/*.wav`` plus the
    background-noise directory. Paths are stored relative to ``root``, sorted."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root not found: {root}")
    keywords: Dict[str, List[str]] = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if sub.name.startswith("_") or sub.name.startswith("."):
            continue
        keywords[sub.name] = sorted(f"{sub.name}/{f.name}" for f in sub.iterdir()
                                    if f.suffix.lower() == ".wav")
    if not keywords:
        raise CorpusError(f"no keyword directories under {root}")
    noise_dir = root / NOISE_DIR
    silence = []
    if noise_dir.is_dir():
        silence = sorted(f"{NOISE_DIR}/{f.name}" for f in noise_dir.iterdir() if f.suffix.lower() == ".wav")
    return CorpusIndex(root=root, keywords=keywords, silence_sources=silence)


@dataclass
class ClassPartition:
    user_keywords: List[str]
    training_keywords: List[str]
    unknown_keywords: List[str]
    silence_sources: List[str]

    def validate(self, all_keywords: Optional[Sequence[str]] = None) -> None:
        groups = [set(self.user_keywords), set(self.training_keywords), set(self.unknown_keywords)]
        if (groups[0] & groups[1]) or (groups[0] & groups[2]) or (groups[1] & groups[2]):
            raise CorpusError("keyword groups overlap")
        if all_keywords is not None and set().union(*groups) != set(all_keywords):
            raise CorpusError("partition does not cover the corpus keywords")


def make_partition(index: CorpusIndex, task_preset: str, rng: np.random.Generator,
                   n_unknown: int = N_UNKNOWN) -> ClassPartition:
    """User keywords from the preset; ``n_unknown`` random keywords of the rest
    form the unknown set and the remainder are the meta-training keywords."""
    if task_preset not in PRESETS:
        raise CorpusError(f"unknown preset {task_preset!r}; choose from {sorted(PRESETS)}")
    user = list(PRESETS[task_preset])
    missing = [k for k in user if k not in index.keywords]
    if missing:
        raise CorpusError(f"preset keywords missing from corpus: {missing}")
    rest = sorted(k for k in index.keywords if k not in user)
    if len(rest) <= n_unknown:
        raise CorpusError(f"need more than {n_unknown} non-preset keywords, found {len(rest)}")
    picked = rng.choice(len(rest), size=n_unknown, replace=False)
    unknown = sorted(rest[i] for i in picked)
    training = [k for k in rest if k not in unknown]
    part = ClassPartition(user_keywords=sorted(user), training_keywords=training,
                          unknown_keywords=unknown, silence_sources=list(index.silence_sources))
    part.validate(index.keywords)
    return part


@dataclass
class SplitManifest:
    root: str
    preset: str
    seed: int
    eval_per_class: int
    partition: ClassPartition
    splits: Dict[str, Dict[str, List[str]]] = field(default_factory=dict)

    def files(self, split: str, cls: str) -> List[str]:
        return self.splits[split].get(cls, [])

    def to_dict(self) -> dict:
        return {"format": "metakws-manifest", "version": 1, "root": self.root,
                "preset": self.preset, "seed": self.seed, "eval_per_class": self.eval_per_class,
                "partition": asdict(self.partition),
                "splits": {s: self.splits[s] for s in SPLITS}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        if d.get("format") != "metakws-manifest":
            raise CorpusError("not a split manifest")
        return cls(root=d["root"], preset=d["preset"], seed=d["seed"],
                   eval_per_class=d["eval_per_class"], partition=ClassPartition(**d["partition"]),
                   splits={s: {k: list(v) for k, v in d["splits"][s].items()} for s in SPLITS})

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def check(self) -> None:
        """Every file in at most one split, and all listed files exist."""
        seen = set()
        for s in SPLITS:
            for files in self.splits[s].values():
                for f in files:
                    if f in seen:
                        raise CorpusError(f"{f} appears in more than one split")
                    seen.add(f)
                    if not (Path(self.root) / f).is_file():
                        raise CorpusError(f"missing file {f}")


def make_splits(index: CorpusIndex, partition: ClassPartition, eval_per_class: int,
                rng: np.random.Generator, max_shot: int = 0, preset: str = "",
                seed: int = 0) -> SplitManifest:
    """Assign files to splits.

    User keywords are split into a disjoint eval pool (``eval_per_class``
    files) and fine-tune pool (the rest, at least ``max_shot`` files).
    Training and unknown keywords go entirely to meta-training.
    """
    splits: Dict[str, Dict[str, List[str]]] = {s: {} for s in SPLITS}
    for kw in partition.user_keywords:
        files = index.keywords[kw]
        if len(files) < eval_per_class + max(max_shot, 0):
            raise CorpusError(f"keyword {kw!r} has {len(files)} files, need "
                              f"{eval_per_class} for evaluation + {max_shot} for fine-tuning")
        order = rng.permutation(len(files))
        splits["eval_pool"][kw] = sorted(files[i] for i in order[:eval_per_class])
        splits["finetune_pool"][kw] = sorted(files[i] for i in order[eval_per_class:])
    for kw in list(partition.training_keywords) + list(partition.unknown_keywords):
        splits["meta_train"][kw] = list(index.keywords[kw])
    return SplitManifest(root=str(index.root), preset=preset, seed=seed,
                         eval_per_class=eval_per_class, partition=partition, splits=splits)


def build_manifest(root, preset: str, seed: int, eval_per_class: int = 100,
                   max_shot: int = 0) -> SplitManifest:
    """scan -> partition -> splits with independent child streams of ``seed``."""
    index = scan_corpus(root)
    part_seed, split_seed = np.random.SeedSequence(seed).spawn(2)
    partition = make_partition(index, preset, np.random.default_rng(part_seed))
    return make_splits(index, partition, eval_per_class, np.random.default_rng(split_seed),
                       max_shot=max_shot, preset=preset, seed=seed)


# -- feature cache ---------------------------------------------------------------
CACHE_MAGIC = b"MKWSFEAT"
CACHE_VERSION = 1


def write_feature_file(path, arr: np.ndarray) -> None:
    """Header: magic, u32 version, u32 ndim, u32 dims...; then row-major f32 LE."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = CACHE_MAGIC + struct.pack("<II", CACHE_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.{id(arr):x}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_feature_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != CACHE_MAGIC:
        raise CorpusError(f"{path}: bad feature-cache magic")
    version, ndim = struct.unpack_from("<II", raw, 8)
    if version != CACHE_VERSION:
        raise CorpusError(f"{path}: unsupported cache version {version}")
    shape = struct.unpack_from(f"<{ndim}I", raw, 16)
    offset = 16 + 4 * ndim
    count = int(np.prod(shape))
    if len(raw) != offset + 4 * count:
        raise CorpusError(f"{path}: truncated feature file")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)


def default_cache_dir() -> Path:
    env = os.environ.get("METAKWS_CACHE_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "metakws"


class FeatureCache:
    """On-disk MFCC cache keyed by (file content hash, front-end config hash).

    Writes go through a temporary file and an atomic rename, so concurrent
    writers of distinct keys never see partial files.
    """

    def __init__(self, cache_dir=None, frontend: FrontendConfig = FrontendConfig()):
        self.dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        self.frontend = frontend
        self._cfg_key = frontend.digest()
        self.hits = 0
        self.misses = 0

    def key_path(self, content: bytes) -> Path:
        h = hashlib.sha1(content).hexdigest()
        return self.dir / self._cfg_key / h[:2] / f"{h}.feat"

    def features(self, path) -> np.ndarray:
        content = Path(path).read_bytes()
        key = self.key_path(content)
        if key.is_file():
            self.hits += 1
            return read_feature_file(key)
        self.misses += 1
        feats = mfcc(decode_wav(content, source=str(path)), self.frontend)
        write_feature_file(key, feats)
        return feats


@dataclass
class Example:
    features: np.ndarray
    class_name: str
    source_path: str


class ExampleStore:
    """Resolves item sources to feature maps.

    A source is either a corpus-relative WAV path, or a silence descriptor
    ``silence:<noise path>@<start>*<gain>`` rendered on demand.
    """

    def __init__(self, root, frontend: FrontendConfig = FrontendConfig(),
                 cache: Optional[FeatureCache] = None):
        self.root = Path(root)
        self.frontend = frontend
        self.cache = cache
        self._mem: Dict[str, np.ndarray] = {}
        self._noise: Dict[str, AudioClip] = {}

    def noise(self, rel: str) -> AudioClip:
        if rel not in self._noise:
            self._noise[rel] = load_wav(self.root / rel, length=None)
        return self._noise[rel]

    def features(self, source: str) -> np.ndarray:
        feats = self._mem.get(source)
        if feats is not None:
            return feats
        if source.startswith("silence:"):
            rel, start, gain = parse_silence_source(source)
            feats = mfcc(render_silence(self.noise(rel), start, gain), self.frontend)
            return feats
        if self.cache is not None:
            feats = self.cache.features(self.root / source)
        else:
            feats = mfcc(load_wav(self.root / source), self.frontend)
        self._mem[source] = feats
        return feats

    def stack(self, sources: Sequence[str]) -> np.ndarray:
        t, d = self.frontend.feature_shape()
        out = np.empty((len(sources), t, d), dtype=np.float32)
        for i, s in enumerate(sources):
            out[i] = self.features(s)
        return out

    def example(self, source: str, class_name: str) -> Example:
        return Example(self.features(source), class_name, source)

    def warm(self, sources: Sequence[str]) -> int:
        for s in sources:
            self.features(s)
        return len(sources)


def silence_source(noise_rel: str, start: int, gain: float) -> str:
    return f"silence:{noise_rel}@{start}*{gain!r}"


def parse_silence_source(source: str) -> Tuple[str, int, float]:
    body = source[len("silence:"):]
    rel, rest = body.rsplit("@", 1)
    start, gain = rest.split("*", 1)
    return rel, int(start), float(gain)
