"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are repeated in an "acceptance criteria" section at the end of
the pytest run.
"""
import statistics
import time

import numpy as np
import pytest

from metakws.audio import AudioClip, FrontendConfig, load_wav, mfcc
from metakws.autodiff import Tensor, default_dtype, grad, load_params, save_params
from metakws.cli import main
from metakws.dataset import ExampleStore, FeatureCache, build_manifest
from metakws.episodes import EpisodeConfig, sample_meta_task
from metakws.evaluation import run_eval
from metakws.meta_learn import TrainConfig, meta_gradient_losses, meta_step, meta_train
from metakws.model import ModelConfig, cross_entropy, forward, init_params
from metakws.synthetic import generate_corpus

from helpers import MLP_SHAPES, check_extended_task, mlp_loss, np_composed
from oracles import central_difference, max_relative_error, reference_mfcc

REDUCED = ModelConfig(n_blocks=2, filters=8, input_shape=(12, 10), n_outputs=12)


@pytest.fixture(scope="module")
def desk_root(tmp_path_factory):
    """Desk-scale corpus: 130 clips for every keyword, enough for 100 query clips per user keyword."""
    root = tmp_path_factory.mktemp("desk")
    return generate_corpus(root, clips_per_keyword=130, seed=0, noise_seconds=20, n_speakers=300)


@pytest.fixture(scope="module")
def desk_store(desk_root, cache_dir):
    return ExampleStore(desk_root, cache=FeatureCache(cache_dir))


def test_criterion_1_gradients(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        with default_dtype(np.float64):
            p = init_params(REDUCED, rng, dtype=np.float64)
            arrays = {k: v.data + 0.1 * rng.normal(size=v.shape) for k, v in p.items()}
            x = rng.normal(size=(4, 12, 10))
            y = rng.integers(0, 12, 4)

            def f():
                return float(cross_entropy(forward({k: Tensor(a) for k, a in arrays.items()}, x, REDUCED), y).data)

            params = {k: Tensor(a.copy(), requires_grad=True) for k, a in arrays.items()}
            g = grad(cross_entropy(forward(params, x, REDUCED), y), params)
            fd = central_difference(f, arrays, h=1e-5)
        worst = max(worst, max(max_relative_error(g[k].data, fd[k]) for k in arrays))
    elapsed = time.perf_counter() - t0
    ok = criterion(1, worst < 1e-5 and elapsed < 60,
                   f"max relative error {worst:.2e} (< 1e-5), {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_2_second_order(criterion):
    rng = np.random.default_rng(3)
    arrays = {k: rng.normal(0, 0.7, s) for k, s in MLP_SHAPES.items()}
    n_params = sum(a.size for a in arrays.values())
    xs, ys = rng.normal(size=(6, 3)), rng.integers(0, 3, 6)
    xq, yq = rng.normal(size=(9, 3)), rng.integers(0, 3, 9)
    base = dict(alpha=0.3, beta=1.0, inner_steps=1, loss_reduction="sum", task_aggregation="sum")
    theta = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    task = (lambda p: mlp_loss(p, xs, ys), lambda p: mlp_loss(p, xq, yq))
    with default_dtype(np.float64):
        g2, _ = meta_gradient_losses(theta, [task], TrainConfig(**base))
        g1, _ = meta_gradient_losses(theta, [task], TrainConfig(**base, first_order=True))
    fd = central_difference(lambda: np_composed(arrays, xs, ys, xq, yq, 0.3, 1), arrays)
    fd_err = max(max_relative_error(g2[k], fd[k]) for k in arrays)
    fo_gap = max(float(np.max(np.abs(g2[k] - g1[k]))) for k in arrays)

    # scalar case: L_S = (t - 1)^2 / 2, L_Q = (t + 1)^2 / 2, alpha 0.1, t = 0
    scalar = {"theta": Tensor(np.array(0.0), requires_grad=True)}
    quad = (lambda p: 0.5 * (p["theta"] - 1.0) ** 2, lambda p: 0.5 * (p["theta"] + 1.0) ** 2)
    with default_dtype(np.float64):
        gs, _ = meta_gradient_losses(scalar, [quad], TrainConfig(**dict(base, alpha=0.1)))
    closed = abs(float(gs["theta"]) - 0.99)
    ok = criterion(2, n_params <= 50 and fd_err < 1e-4 and closed < 1e-12 and fo_gap > 1e-3,
                   f"{n_params} params, FD relative error {fd_err:.2e} (< 1e-4), "
                   f"|g - 0.99| = {closed:.1e} (< 1e-12), first-order gap {fo_gap:.3f}")
    assert ok


def test_criterion_3_alpha_zero(criterion):
    rng = np.random.default_rng(11)
    cfg = TrainConfig(alpha=0.0, beta=0.01, inner_steps=3, loss_reduction="sum", task_aggregation="sum")
    with default_dtype(np.float64):
        theta = init_params(REDUCED, rng, dtype=np.float64)
        tasks = [(rng.normal(size=(6, 12, 10)), rng.integers(0, 12, 6),
                  rng.normal(size=(8, 12, 10)), rng.integers(0, 12, 8)) for _ in range(4)]
        new, _ = meta_step(theta, tasks, cfg, REDUCED)
        plain = {k: np.zeros_like(v.data) for k, v in theta.items()}
        for _, _, xq, yq in tasks:
            g = grad(cross_entropy(forward(theta, xq, REDUCED), yq), theta)
            for k in plain:
                plain[k] += g[k].data
    mismatched = [k for k in theta if not np.array_equal(new[k].data, theta[k].data - 0.01 * plain[k])]
    ok = criterion(3, not mismatched, f"{len(theta) - len(mismatched)}/{len(theta)} tensors bit-identical")
    assert ok


def test_criterion_4_episode_properties(manifest, store, criterion):
    cfg = EpisodeConfig(n_new=10, k_shot=5, query_per_class=15, variant="extended")
    failures = []
    fixed = set()
    for seed in range(1000):
        task = sample_meta_task(manifest.partition, manifest, cfg, np.random.default_rng(seed), store)
        fixed.add((task.class_slots["silence"], task.class_slots["unknown"]))
        try:
            check_extended_task(task, cfg, manifest)
        except AssertionError:
            failures.append(seed)
    ok = criterion(4, not failures and fixed == {(10, 11)},
                   f"1000 tasks, {len(failures)} failing, fixed slots {sorted(fixed)}")
    assert ok


def test_criterion_5_mfcc_oracle(desk_root, criterion):
    cfg = FrontendConfig()
    fields = dict(frame_len=cfg.frame_len, frame_step=cfg.frame_step, fft_size=cfg.fft_size,
                  n_mels=cfg.n_mels, n_coeffs=cfg.n_coeffs, low=cfg.mel_low, high=cfg.mel_high,
                  floor=cfg.log_floor, sample_rate=cfg.sample_rate)
    words = sorted(p for p in desk_root.iterdir() if p.is_dir() and not p.name.startswith("_"))
    clips = [load_wav(sorted(w.glob("*.wav"))[0]) for w in words[:10]]
    t = np.arange(16000) / 16000
    clips.append(AudioClip((0.8 * np.sin(2 * np.pi * 700 * t)).astype(np.float32)))
    clips.append(AudioClip((0.5 * np.sin(2 * np.pi * (100 * t + 3000 * t * t))).astype(np.float32)))
    worst = max(float(np.max(np.abs(mfcc(c, cfg) - reference_mfcc(c.samples, **fields)))) for c in clips)
    ok = criterion(5, len(clips) == 12 and worst < 1e-3, f"{len(clips)} signals, max |delta| {worst:.2e} (< 1e-3)")
    assert ok


def test_criterion_6_chance_level(desk_root, desk_store, tmp_path, criterion):
    model = ModelConfig()
    path = save_params(init_params(model, np.random.default_rng(0)), tmp_path / "ckpt_0")
    params = load_params(path)
    manifest = build_manifest(desk_root, "digits", seed=0, eval_per_class=100, max_shot=5)
    # the untrained initializer is scored as-is: no fine-tuning steps
    rep = run_eval(params, manifest, desk_store, EpisodeConfig(k_shot=5), TrainConfig(finetune_steps=0),
                   model, n_trials=100)
    ok = criterion(6, abs(rep.mean - 1 / 12) <= 0.04,
                   f"mean accuracy {rep.mean:.4f} over {rep.n_trials} trials, target 0.0833 +- 0.04")
    assert ok


DESK_MODEL = ModelConfig(filters=16)
DESK_TRAIN = TrainConfig(alpha=0.1, beta=0.001, inner_steps=1, finetune_steps=10, meta_batch=4,
                         meta_iterations=400, loss_reduction="mean", outer_optimizer="adam",
                         supervised_steps=500)


@pytest.mark.slow
def test_criterion_7_directional(desk_root, desk_store, criterion):
    t0 = time.perf_counter()
    acc = {"extended": [], "original": [], "supervised": []}
    for seed in range(3):
        manifest = build_manifest(desk_root, "digits", seed=seed, eval_per_class=100, max_shot=5)
        for variant in ("extended", "original"):
            ep = EpisodeConfig(k_shot=5, query_per_class=5, variant=variant)
            theta = meta_train(manifest, desk_store, DESK_TRAIN, DESK_MODEL, ep, seed=seed).params
            acc[variant].append(run_eval(theta, manifest, desk_store, ep, DESK_TRAIN, DESK_MODEL,
                                         n_trials=20, base_seed=1000 * seed).mean)
        ep = EpisodeConfig(k_shot=5, variant="supervised")
        acc["supervised"].append(run_eval(None, manifest, desk_store, ep, DESK_TRAIN, DESK_MODEL,
                                          n_trials=10, base_seed=1000 * seed).mean)
    med = {k: 100 * statistics.median(v) for k, v in acc.items()}
    hours = (time.perf_counter() - t0) / 3600
    ok = (med["extended"] - med["supervised"] >= 15 and med["extended"] >= med["original"] - 2
          and hours <= 4)
    per_seed = ", ".join(f"{k} {[round(100 * a, 2) for a in v]}" for k, v in acc.items())
    criterion(7, ok, f"medians ext {med['extended']:.2f}, ori {med['original']:.2f}, "
                     f"sup {med['supervised']:.2f} (ext - sup >= 15, ext >= ori - 2), "
                     f"{hours:.2f} h; per seed: {per_seed}")
    assert ok


def test_criterion_8_determinism(corpus_root, cache_dir, tmp_path, criterion):
    prep = tmp_path / "prep"
    assert main(["prepare", "--data-root", str(corpus_root), "--out", str(prep), "--seed", "0",
                 "--eval-per-class", "4", "--cache-dir", str(cache_dir)]) == 0
    common = ["--manifest", str(prep / "manifest.json"), "--seed", "5", "--threads", "1",
              "--cache-dir", str(cache_dir),
              "--set", "model.filters=8", "--set", "episode.k_shot=2", "--set", "episode.query_per_class=2",
              "--set", "train.meta_batch=2", "--set", "train.inner_steps=1",
              "--set", "train.loss_reduction=mean", "--set", "train.outer_optimizer=adam"]
    ckpts, reports = [], []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["meta-train", "--variant", "extended", "--iterations", "100", "--out", str(out)]
                    + common) == 0
        ckpts.append((out / "ckpt_100").read_bytes())
    for run in ("a", "b"):
        out = tmp_path / f"eval_{run}"
        assert main(["evaluate", "--checkpoint", str(tmp_path / "a" / "ckpt_100"), "--variant", "extended",
                     "--K", "2", "--trials", "5", "--base-seed", "3", "--out", str(out)] + common) == 0
        reports.append((out / "report_extended_K2.json").read_bytes())
    ok = criterion(8, ckpts[0] == ckpts[1] and reports[0] == reports[1],
                   f"checkpoints identical: {ckpts[0] == ckpts[1]} ({len(ckpts[0])} bytes), "
                   f"reports identical: {reports[0] == reports[1]}")
    assert ok
