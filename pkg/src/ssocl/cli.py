"""Command-line entry point: ``ssocl {simulate,run,ablate,gradcheck,export-embeddings}``.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import VARIANTS, RunConfig, config_from_dict, load_config
from .errors import ConfigError, DataError
from .gradcheck import STEP, TOLERANCE, run_gradcheck
from .memory import MemoryBuffer, MemoryEntry, export_csv
from .model import clone_model, embed, load_checkpoint, save_checkpoint
from .stream import (LabeledSet, Stream, StreamMetadata, generate_synthetic, load_segments, save_segments)

log = logging.getLogger("ssocl")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- inputs

def resolve_config(args) -> RunConfig:
    preset = getattr(args, "preset", "desk")
    cfg = load_config(args.config, preset) if args.config else config_from_dict({}, preset)
    values = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        values["synthetic"]["seed"] = args.seed
        values["train"]["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        values["train"]["variant"] = args.variant
    return config_from_dict(values, preset)


def _labeled(ds, name) -> LabeledSet:
    return LabeledSet(ds.x, ds.require_labels())


def load_inputs(cfg: RunConfig, stream_arg: str):
    """Return ``(stream, metadata, tests, source)`` for a synthetic spec or an SSEG file.

    An SSEG stream may have sibling ``test.sseg`` and ``source.sseg`` files (as
    written by ``simulate``); without them the stream itself is the evaluation
    set and the synthetic source is used for pretraining.
    """
    if stream_arg == "synthetic":
        data = generate_synthetic(cfg.synthetic)
        return data.stream, data.metadata, data.tests, data.source
    path = Path(stream_arg)
    ds = load_segments(path)
    labels = ds.require_labels()
    subjects = ds.subjects if ds.subjects is not None else np.zeros(len(labels), dtype=int)
    if ds.x.shape[1:] != (cfg.model.channels, cfg.model.length):
        raise DataError(f"{path}: segments are {ds.x.shape[1:]}, model expects "
                        f"{(cfg.model.channels, cfg.model.length)}")
    if labels.min() < 0 or labels.max() >= cfg.model.n_classes:
        raise DataError(f"{path}: labels outside [0, {cfg.model.n_classes})")
    meta = StreamMetadata(labels, subjects)
    test_path = path.with_name("test.sseg")
    if test_path.exists():
        test = load_segments(test_path)
        test_y = test.require_labels()
        if test.subjects is None:
            raise DataError(f"{test_path} needs subject ids")
        tests = {int(s): LabeledSet(test.x[test.subjects == s], test_y[test.subjects == s])
                 for s in np.unique(subjects)}
    else:
        tests = {int(s): LabeledSet(ds.x[subjects == s], labels[subjects == s]) for s in np.unique(subjects)}
    source_path = path.with_name("source.sseg")
    if source_path.exists():
        source = _labeled(load_segments(source_path), "source")
    else:
        source = generate_synthetic(cfg.synthetic).source
    return Stream(ds.x), meta, tests, source


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    data = generate_synthetic(cfg.synthetic)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fs = cfg.synthetic.sample_rate_hz
    save_segments(out / "stream.sseg", data.stream.segments, data.metadata.labels, data.metadata.subjects, fs)
    order = sorted(data.tests)
    save_segments(out / "test.sseg", np.concatenate([data.tests[s].x for s in order]),
                  np.concatenate([data.tests[s].y for s in order]),
                  np.concatenate([np.full(len(data.tests[s].y), s) for s in order]), fs)
    save_segments(out / "source.sseg", data.source.x, data.source.y, None, fs)
    (out / "config.json").write_text(_dump(cfg.to_dict()))
    print(f"wrote {len(data.stream)} stream segments to {out / 'stream.sseg'}")
    return EXIT_OK


def execute_run(cfg: RunConfig, stream_arg: str, base_model=None, on_step=None):
    """Pretrain (unless ``base_model`` is given) and stream; returns ``(metrics, log, learner, cursor)``."""
    from .engine import compute_metrics, pretrain_source, run_stream

    stream, meta, tests, source = load_inputs(cfg, stream_arg)
    tc = cfg.train
    if base_model is None:
        base_model, _ = pretrain_source(cfg.model, source, tc.pretrain_epochs, tc.seed, tc.pretrain_lr,
                                        tc.pretrain_batch, tc.weight_decay)
    log_, learner, cursor = run_stream(clone_model(base_model), cfg, stream, meta, tests, on_step)
    metrics = compute_metrics(log_)
    metrics.update({"per_subject": log_.to_dict(), "variant": tc.variant, "seed": tc.seed})
    return metrics, log_, learner, cursor


def save_memory(buffer: MemoryBuffer, out: Path, sample_rate_hz=None) -> None:
    if buffer.entries:
        save_segments(out / "memory.sseg", buffer.segments, buffer.labels, None, sample_rate_hz)
    meta = {"capacity": buffer.capacity, "n_classes": buffer.n_classes, "seen": buffer.seen,
            "entries": [{"label": e.label, "entropy": e.entropy, "step": e.step, "uid": e.uid}
                        for e in buffer.entries]}
    (out / "memory.json").write_text(_dump(meta))


def load_memory(run_dir: Path) -> MemoryBuffer:
    info_path = run_dir / "memory.json"
    if not info_path.exists():
        raise DataError(f"{info_path} not found")
    info = json.loads(info_path.read_text())
    buffer = MemoryBuffer(info["capacity"], info["n_classes"], seen=info["seen"])
    if info["entries"]:
        segs = load_segments(run_dir / "memory.sseg").x
        if len(segs) != len(info["entries"]):
            raise DataError("memory.sseg and memory.json disagree on the number of entries")
        buffer.entries = [MemoryEntry(s, e["label"], e["entropy"], e["step"], e["uid"])
                          for s, e in zip(segs, info["entries"])]
    return buffer


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    metrics, log_, learner, _ = execute_run(cfg, args.stream, on_step=records.append)
    metrics.update({"config": cfg.to_dict(), "run_id": cfg.run_id(), "stream": args.stream})
    with open(out / "run.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"final": True, "AdapAcc": metrics["AdapAcc"], "GenAcc": metrics["GenAcc"],
                             "ForAcc": metrics["ForAcc"]}, sort_keys=True) + "\n")
    (out / "metrics.json").write_text(_dump(metrics))
    save_checkpoint(learner.model, out / "model.ckpt")
    save_memory(learner.memory, out, cfg.synthetic.sample_rate_hz)
    print(f"run {cfg.run_id()} [{cfg.train.variant}] AdapAcc={metrics['AdapAcc']:.4f} "
          f"GenAcc={metrics['GenAcc']:.4f} ForAcc={metrics['ForAcc']:+.4f}")
    return EXIT_OK


def ablate(cfg: RunConfig, seeds, variants=VARIANTS, stream_arg="synthetic", echo=print) -> dict:
    """Every variant on every seed; variants of one seed share the pretrained source model."""
    from .engine import pretrain_source

    per_seed = {v: [] for v in variants}
    for seed in seeds:
        values = cfg.to_dict()
        values["synthetic"]["seed"] = seed
        values["train"]["seed"] = seed
        seeded = config_from_dict(values, cfg.model.preset)
        _, _, _, source = load_inputs(seeded, stream_arg)
        tc = seeded.train
        base, _ = pretrain_source(seeded.model, source, tc.pretrain_epochs, seed, tc.pretrain_lr,
                                  tc.pretrain_batch, tc.weight_decay)
        for v in variants:
            values["train"]["variant"] = v
            m, *_ = execute_run(config_from_dict(values, cfg.model.preset), stream_arg, base_model=base)
            per_seed[v].append({k: m[k] for k in ("AdapAcc", "GenAcc", "ForAcc")})
            echo(f"seed {seed} {v:<14s} AdapAcc={m['AdapAcc']:.4f} GenAcc={m['GenAcc']:.4f} ForAcc={m['ForAcc']:+.4f}")
    means = {v: {k: float(np.mean([r[k] for r in rows])) for k in ("AdapAcc", "GenAcc", "ForAcc")}
             for v, rows in per_seed.items()}
    return {"seeds": list(seeds), "per_seed": per_seed, "mean": means, "config": cfg.to_dict(),
            "run_id": cfg.run_id()}


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    seeds = [cfg.train.seed + i for i in range(args.seeds)]
    result = ablate(cfg, seeds, stream_arg=args.stream)
    for v, m in result["mean"].items():
        print(f"mean {v:<14s} AdapAcc={m['AdapAcc']:.4f} GenAcc={m['GenAcc']:.4f} ForAcc={m['ForAcc']:+.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(_dump(result))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, seconds = run_gradcheck(args.seed or 0, fault=args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<38s} max_rel_error={r.max_rel_error:.3e}")
    worst = max(results, key=lambda r: r.max_rel_error)
    print(f"worst: {worst.name} ({worst.max_rel_error:.3e}); tolerance {TOLERANCE:g}, h={STEP:g}, "
          f"{len(results)} checks in {seconds:.2f}s")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("gradient check failed for: " + ", ".join(failed), file=sys.stderr)
        return 4
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    run_dir = Path(args.run)
    ckpt = run_dir / "model.ckpt"
    if not ckpt.exists():
        raise DataError(f"no checkpoint at {ckpt}")
    model = load_checkpoint(ckpt)
    buffer = load_memory(run_dir)
    z = embed(model, buffer.segments) if buffer.entries else np.zeros((0, model.config.embed_dim))
    out = Path(args.out) if args.out else run_dir / "embeddings.csv"
    export_csv(buffer, z, out)
    print(f"wrote {len(buffer.entries)} rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssocl", description="Self-supervised online continual learning on segment streams.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p, variant=False, stream=False):
        p.add_argument("--config", metavar="PATH", help="JSON config; sections model/train/ssl/kmeans/menm/synthetic "
                       "override the preset (default: preset values only)")
        p.add_argument("--preset", choices=("desk", "paper"), default="desk",
                       help="base defaults (default: desk)")
        p.add_argument("--seed", type=int, default=None, help="overrides synthetic.seed and train.seed (default: config)")
        if variant:
            p.add_argument("--variant", choices=VARIANTS, default=None, help="pipeline variant (default: config, full)")
        if stream:
            p.add_argument("--stream", default="synthetic", metavar="{synthetic|PATH.sseg}",
                           help="stream source (default: synthetic)")

    p = sub.add_parser("simulate", help="write a synthetic stream, test and source sets as SSEG files")
    common(p)
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="pretrain on source data, then learn from the stream")
    common(p, variant=True, stream=True)
    p.add_argument("--out", required=True, metavar="DIR", help="run directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="all variants over several seeds")
    common(p, stream=True)
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds (default: 5)")
    p.add_argument("--out", metavar="DIR", help="write ablation.json here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all layers and losses")
    p.add_argument("--seed", type=int, default=0, help="seed for the random test inputs (default: 0)")
    p.add_argument("--inject-fault", metavar="OP", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-embeddings", help="CSV of memory entries embedded by the final model")
    p.add_argument("--run", required=True, metavar="DIR", help="completed run directory")
    p.add_argument("--out", metavar="PATH", help="CSV path (default: DIR/embeddings.csv)")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
