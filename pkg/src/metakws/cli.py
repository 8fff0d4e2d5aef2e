"""``metakws`` command-line entry point.

Exit codes: 0 success, 2 usage/config/corpus error, 3 training divergence.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from threadpoolctl import threadpool_limits

from . import __version__
from .audio import AudioFormatError
from .autodiff import CheckpointError, load_params
from .config import ConfigError, RunConfig, load_config
from .dataset import CorpusError, ExampleStore, FeatureCache, SplitManifest, build_manifest
from .episodes import EpisodeError
from .evaluation import (DEFAULT_SHOTS, EvalReport, run_eval, write_plot_data, write_table)
from .meta_learn import DivergenceError, meta_batch_for_shot, meta_train, write_log
from .plotting import plot_confusion, plot_shot_sweep, plot_training_log

log = logging.getLogger("metakws")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


_LIMITS: list = []


# -- helpers ---------------------------------------------------------------------
def _parse_set(items: Optional[List[str]]) -> Dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(args, extra: Dict[str, object]) -> RunConfig:
    flags: Dict[str, object] = {
        "data_root": getattr(args, "data_root", None),
        "preset": getattr(args, "preset", None),
        "seed": getattr(args, "seed", None),
        "out": getattr(args, "out", None),
        "cache_dir": getattr(args, "cache_dir", None),
        "threads": getattr(args, "threads", None),
        "manifest": getattr(args, "manifest", None),
    }
    flags.update(extra)
    # dedicated flags win over generic --set entries
    overrides: Dict[str, object] = dict(_parse_set(getattr(args, "set", None)))
    overrides.update({k: v for k, v in flags.items() if v is not None})
    cfg = load_config(getattr(args, "config", None), overrides)
    _LIMITS.append(threadpool_limits(limits=cfg.threads))
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cache(cfg: RunConfig) -> FeatureCache:
    return FeatureCache(cfg.cache_dir or None, cfg.frontend)


def _data_root(cfg: RunConfig) -> Path:
    if not cfg.data_root:
        raise UsageError("no dataset root given (--data-root or data_root in the config)")
    root = Path(cfg.data_root)
    if not root.is_dir():
        raise CorpusError(f"corpus root not found: {root}")
    return root


def _manifest(cfg: RunConfig, out: Path) -> SplitManifest:
    """Manifest named in the config, else ``<out>/manifest.json``, else built from the corpus."""
    if cfg.manifest:
        path = Path(cfg.manifest)
        if not path.is_file():
            raise UsageError(f"manifest not found: {path}")
        manifest = SplitManifest.load(path)
    elif (out / "manifest.json").is_file():
        manifest = SplitManifest.load(out / "manifest.json")
    else:
        manifest = build_manifest(_data_root(cfg), cfg.preset, cfg.seed,
                                  eval_per_class=cfg.episode.eval_per_class, max_shot=cfg.max_shot)
        manifest.save(out / "manifest.json")
    if cfg.data_root and Path(cfg.data_root).resolve() != Path(manifest.root).resolve():
        log.warning("manifest root %s differs from data_root %s; using the manifest's",
                    manifest.root, cfg.data_root)
    # echo what was actually used into the resolved config
    cfg.manifest = str(Path(cfg.manifest).resolve() if cfg.manifest else (out / "manifest.json").resolve())
    cfg.data_root = manifest.root
    cfg.preset = manifest.preset
    cfg.episode = dataclasses.replace(cfg.episode, eval_per_class=manifest.eval_per_class)
    return manifest


def _store(cfg: RunConfig, manifest: SplitManifest) -> ExampleStore:
    return ExampleStore(manifest.root, cfg.frontend, _cache(cfg))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_outputs_manifest(out: Path, command: str, files: List[Path]) -> Path:
    """``outputs.json``: every file the command produced, with size and sha256."""
    entries = []
    for f in sorted(set(Path(p) for p in files)):
        entries.append({"path": str(f.relative_to(out)) if f.is_relative_to(out) else str(f),
                        "bytes": f.stat().st_size, "sha256": _sha256(f)})
    path = out / "outputs.json"
    path.write_text(json.dumps({"command": command, "version": __version__, "files": entries},
                               indent=1) + "\n")
    return path


def _progress_trial(t) -> None:
    log.info("trial seed=%d accuracy=%.4f", t.seed, t.accuracy)


def _progress_iter(every: int):
    def cb(row):
        if row["iteration"] % every == 0:
            log.info("iteration %d meta_loss=%.4f (%.0f ms)", row["iteration"],
                     row["meta_loss"], row["wall_ms"])
    return cb


def _load_checkpoint(path: Optional[str]):
    if not path:
        raise UsageError("--checkpoint is required for meta-learned variants")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_params(path)


def _emit_report(report: EvalReport, out: Path, stem: str) -> List[Path]:
    files = [report.save_json(out / f"{stem}.json"),
             write_table([report], out / f"{stem}.csv"),
             plot_confusion(report, out / f"{stem}_confusion.png")]
    print(f"{report.method} K={report.k_shot}: {100 * report.mean:.2f} ± {100 * report.ci95:.2f}% "
          f"over {report.n_trials} trials")
    return files


# -- commands --------------------------------------------------------------------
def cmd_prepare(args) -> int:
    cfg = _resolve(args, {"episode.eval_per_class": args.eval_per_class, "max_shot": args.max_shot})
    root = _data_root(cfg)
    out = _out_dir(cfg)
    manifest = build_manifest(root, cfg.preset, cfg.seed,
                              eval_per_class=cfg.episode.eval_per_class, max_shot=cfg.max_shot)
    files = [manifest.save(out / "manifest.json"), cfg.save(out / "resolved_config.toml")]
    p = manifest.partition
    print(f"partition: {len(p.user_keywords)} user, {len(p.training_keywords)} training, "
          f"{len(p.unknown_keywords)} unknown keywords; {len(p.silence_sources)} noise files")
    if not args.no_warm:
        sources = sorted({f for split in manifest.splits.values() for fs in split.values() for f in fs})
        cache = _cache(cfg)
        store = ExampleStore(root, cfg.frontend, cache)
        store.warm(sources)
        print(f"feature cache {cache.dir}: {cache.hits} hits, {cache.misses} computed")
    files.append(write_outputs_manifest(out, "prepare", files))
    return EXIT_OK


def cmd_meta_train(args) -> int:
    cfg = _resolve(args, {"episode.variant": args.variant,
                          "train.meta_iterations": args.iterations,
                          "train.checkpoint_every": args.checkpoint_every})
    if cfg.episode.variant == "supervised":
        raise UsageError("meta-train needs --variant extended or original")
    out = _out_dir(cfg)
    manifest = _manifest(cfg, out)
    files = [cfg.save(out / "resolved_config.toml")]
    if (out / "manifest.json").is_file():
        files.append(out / "manifest.json")
    init = load_params(args.init) if args.init else None
    result = None
    try:
        result = meta_train(manifest, _store(cfg, manifest), cfg.train, cfg.model, cfg.episode,
                            cfg.seed, out_dir=out, init=init,
                            progress=_progress_iter(max(1, cfg.train.meta_iterations // 20)))
    finally:
        rows = result.log if result is not None else []
        if rows:
            files.append(write_log(rows, out / "train_log.csv"))
            files.append(plot_training_log(rows, out / "train_log.png",
                                           title=f"meta-training ({cfg.episode.variant})"))
    files.extend(result.checkpoints)
    files.append(write_outputs_manifest(out, "meta-train", files))
    print(f"{len(result.checkpoints)} checkpoint(s) and {len(result.log)} log rows in {out}")
    return EXIT_OK


def _eval_command(args, variant: str, command: str) -> int:
    cfg = _resolve(args, {"episode.variant": variant, "episode.k_shot": args.K,
                          "n_trials": args.trials, "base_seed": args.base_seed})
    out = _out_dir(cfg)
    params = None if variant == "supervised" else _load_checkpoint(args.checkpoint)
    manifest = _manifest(cfg, out)
    report = run_eval(params, manifest, _store(cfg, manifest), cfg.episode, cfg.train, cfg.model,
                      n_trials=cfg.n_trials, base_seed=cfg.base_seed, progress=_progress_trial)
    files = [cfg.save(out / "resolved_config.toml")]
    files += _emit_report(report, out, f"report_{variant}_K{cfg.episode.k_shot}")
    files.append(write_outputs_manifest(out, command, files))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    return _eval_command(args, args.variant, "evaluate")


def cmd_baseline(args) -> int:
    return _eval_command(args, "supervised", "baseline")


def _parse_k_list(text: str) -> List[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--K-list must be comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--K-list needs at least one positive shot count")
    return ks


def cmd_sweep(args) -> int:
    ks = _parse_k_list(args.K_list)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in ("extended", "original", "supervised"):
            raise UsageError(f"unknown variant {v!r}")
    cfg = _resolve(args, {"n_trials": args.trials, "base_seed": args.base_seed})
    out = _out_dir(cfg)
    manifest = _manifest(cfg, out)
    store = _store(cfg, manifest)
    fixed = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    files = [cfg.save(out / "resolved_config.toml")]
    reports = []
    for variant in variants:
        for k in ks:
            episode = dataclasses.replace(cfg.episode, variant=variant, k_shot=k)
            params = None
            if variant != "supervised":
                params = fixed
                if params is None:
                    train = cfg.train
                    if not args.keep_meta_batch:
                        train = dataclasses.replace(train, meta_batch=meta_batch_for_shot(k))
                    run_dir = out / f"meta_{variant}_K{k}"
                    log.info("meta-training %s for K=%d (%d iterations, meta-batch %d)",
                             variant, k, train.meta_iterations, train.meta_batch)
                    res = meta_train(manifest, store, train, cfg.model, episode, cfg.seed,
                                     out_dir=run_dir,
                                     progress=_progress_iter(max(1, train.meta_iterations // 10)))
                    files += res.checkpoints
                    files.append(write_log(res.log, run_dir / "train_log.csv"))
                    params = res.params
            report = run_eval(params, manifest, store, episode, cfg.train, cfg.model,
                              n_trials=cfg.n_trials, base_seed=cfg.base_seed,
                              progress=_progress_trial)
            files.append(report.save_json(out / f"report_{variant}_K{k}.json"))
            print(f"{report.method} K={k}: {100 * report.mean:.2f} ± {100 * report.ci95:.2f}%")
            reports.append(report)
    files += [write_table(reports, out / "sweep.csv"),
              write_plot_data(reports, out / "plot_data.csv"),
              plot_shot_sweep(reports, out / "sweep.png")]
    files.append(write_outputs_manifest(out, "sweep", files))
    return EXIT_OK


def cmd_synth_corpus(args) -> int:
    from .synthetic import generate_corpus

    root = Path(args.out)
    generate_corpus(root, clips_per_keyword=args.clips, seed=args.seed,
                    noise_seconds=args.noise_seconds)
    print(f"synthetic corpus written to {root}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------
def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="run seed (partition, splits, meta-training)")
    p.add_argument("--threads", type=int, help="BLAS thread cap; 1 gives bit-reproducible runs")
    p.add_argument("--cache-dir", help="feature cache directory (default $METAKWS_CACHE_DIR)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set train.alpha=0.05")
    if data:
        p.add_argument("--data-root", help="Speech-Commands-layout corpus root")
        p.add_argument("--preset", choices=["digits", "commands"])
        p.add_argument("--manifest", help="split manifest from `prepare`")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metakws",
                                     description="Few-shot keyword classification with MAML.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="partition keywords, write the split manifest, warm the cache")
    _common(p)
    p.add_argument("--eval-per-class", type=int, help="eval-pool clips per user keyword")
    p.add_argument("--max-shot", type=int, help="reserve this many fine-tune clips per keyword")
    p.add_argument("--no-warm", action="store_true", help="skip feature extraction")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("meta-train", help="meta-learn an initializer")
    _common(p)
    p.add_argument("--variant", choices=["extended", "original"], default=None)
    p.add_argument("--iterations", type=int, help="meta-iterations")
    p.add_argument("--checkpoint-every", type=int, help="also checkpoint every N iterations")
    p.add_argument("--init", help="start from this checkpoint instead of a random init")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("evaluate", help="fine-tune a checkpoint on K shots, repeated trials")
    _common(p)
    p.add_argument("--checkpoint", help="meta-learned initializer")
    p.add_argument("--variant", choices=["extended", "original", "supervised"], default="extended")
    p.add_argument("--K", type=int, help="shots per user keyword")
    p.add_argument("--trials", type=int, help="number of random trials")
    p.add_argument("--base-seed", type=int, help="seed of the first trial")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="supervised baseline trained on the K-shot support only")
    _common(p)
    p.add_argument("--K", type=int, help="shots per class")
    p.add_argument("--trials", type=int, help="number of random trials")
    p.add_argument("--base-seed", type=int, help="seed of the first trial")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("sweep", help="accuracy as a function of K")
    _common(p)
    p.add_argument("--K-list", default=",".join(map(str, DEFAULT_SHOTS)),
                   help="comma-separated shot counts")
    p.add_argument("--variants", default="extended,supervised",
                   help="comma-separated subset of extended,original,supervised")
    p.add_argument("--checkpoint", help="reuse one initializer for every K instead of meta-training per K")
    p.add_argument("--keep-meta-batch", action="store_true",
                   help="use train.meta_batch for every K (default: 16 below 50 shots, 4 above)")
    p.add_argument("--trials", type=int, help="number of random trials per K")
    p.add_argument("--base-seed", type=int, help="seed of the first trial")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth-corpus", help="write a synthetic corpus in the Speech Commands layout")
    p.add_argument("--out", required=True, help="corpus root to create")
    p.add_argument("--clips", type=int, default=120, help="clips per keyword")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-seconds", type=float, default=20.0)
    p.set_defaults(func=cmd_synth_corpus)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"metakws: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, CorpusError, EpisodeError, CheckpointError,
            AudioFormatError) as exc:
        print(f"metakws: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        while _LIMITS:
            _LIMITS.pop().restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
