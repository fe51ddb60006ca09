"""Command-line entry point wiring the modules into reproducible runs.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 domain error,
5 numerical failure.  Every run writes a resolved-config manifest into its
output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, ingest, metrics, synth, trainer
from .cunet import CUNetConfig, VARIANTS, build
from .errors import (CropTooLarge, InvalidConfig, MalformedRow, NoPreEventData,
                     NonFiniteLoss, OutOfRange, ShapeMismatch, ShiftGridError,
                     ZeroVector)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DOMAIN = 4
EXIT_NUMERIC = 5


class CliError(Exception):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


def _load_json(path, what):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise CliError(EXIT_CONFIG, f"{what}: invalid JSON at line {e.lineno} "
                                    f"column {e.colno}: {e.msg}")
    except OSError as e:
        raise CliError(EXIT_IO, f"{what}: {e}")


def _write_manifest(out_dir, subcommand, config, paths, seeds, started):
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "paths": {k: str(v) for k, v in paths.items()},
        "seeds": seeds,
        "tool_version": __version__,
        "duration_seconds": round(time.monotonic() - started, 3),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, out_dir / "run_manifest.json")


def _threads_cap() -> int:
    raw = os.environ.get("SHIFTGRID_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_gen(args):
    started = time.monotonic()
    raw = _load_json(args.config, "synth config") if args.config else {}
    try:
        config = synth.SynthConfig(**raw)
    except (TypeError, InvalidConfig) as e:
        raise CliError(EXIT_CONFIG, f"synth config: {e}")
    try:
        summary = synth.generate_dataset(config, args.out)
    except OSError as e:
        raise CliError(EXIT_IO, str(e))
    _write_manifest(args.out, "synth-gen", config.to_dict(),
                    {"out": args.out}, {"seed": config.seed}, started)
    print(json.dumps(summary))
    return 0


def _load_raw(raw_dir, icfg):
    raw_dir = Path(raw_dir)
    d_total = icfg.pre_days + icfg.post_days
    world = (icfg.world_m, icfg.world_n)
    try:
        trajectories = ingest.load_trajectories(raw_dir / "trajectories.csv", world, d_total)
        pois = ingest.load_pois(raw_dir / "pois.csv", world, icfg.k)
        splits = _load_json(raw_dir / "splits.json", "splits manifest")
    except (MalformedRow, OutOfRange) as e:
        raise CliError(EXIT_DOMAIN, str(e))
    except OSError as e:
        raise CliError(EXIT_IO, str(e))
    return trajectories, pois, splits


def _split_samples(samples, splits):
    by_uid = {s.user_id: s for s in samples}
    return {name: [by_uid[u] for u in uids if u in by_uid]
            for name, uids in splits.items()}


def cmd_prepare(args):
    started = time.monotonic()
    try:
        icfg = ingest.IngestConfig.from_json(args.config) if args.config \
            else ingest.IngestConfig()
    except (TypeError, KeyError) as e:
        raise CliError(EXIT_CONFIG, f"ingest config: {e}")
    except json.JSONDecodeError as e:
        raise CliError(EXIT_CONFIG, f"ingest config: invalid JSON: {e}")
    except OSError as e:
        raise CliError(EXIT_IO, f"ingest config: {e}")
    trajectories, pois, splits = _load_raw(args.raw, icfg)
    try:
        samples = ingest.build_samples(trajectories, pois, icfg)
    except CropTooLarge as e:
        raise CliError(EXIT_DOMAIN, str(e))
    split_samples = _split_samples(samples, splits)
    out = Path(args.out)
    for name, part in split_samples.items():
        ingest.save_samples(out / name, part, icfg.g, icfg.k)
    n_skipped = len({r.user_id for r in trajectories}) - len(samples)
    _write_manifest(args.out, "prepare", icfg.to_dict(),
                    {"raw": args.raw, "out": args.out}, {}, started)
    print(json.dumps({"samples": {n: len(p) for n, p in split_samples.items()},
                      "skipped": n_skipped}))
    return 0


def _sample_dims(samples, what):
    if not samples:
        raise CliError(EXIT_DOMAIN, f"{what}: empty sample split")
    g = samples[0].v_pre.bitmap.shape[0]
    k = samples[0].sir.values.shape[0]
    return g, k


def cmd_train(args):
    started = time.monotonic()
    try:
        tcfg_raw = _load_json(args.train_config, "train config") if args.train_config else {}
        if args.seed is not None:
            tcfg_raw["seed"] = args.seed
        if args.w_max is not None:
            tcfg_raw["w_max"] = args.w_max
        if args.epochs is not None:
            if args.epochs < 1:
                raise CliError(EXIT_CONFIG, "--epochs must be >= 1")
            tcfg_raw["max_epochs"] = args.epochs
        tcfg = trainer.TrainConfig(**tcfg_raw)
    except (TypeError, InvalidConfig) as e:
        raise CliError(EXIT_CONFIG, f"train config: {e}")

    train_samples = ingest.load_samples(Path(args.samples) / "train")
    val_samples = ingest.load_samples(Path(args.samples) / "val")
    g, k = _sample_dims(train_samples, "train split")

    try:
        mcfg_raw = _load_json(args.model_config, "model config") if args.model_config else {}
        mcfg_raw.setdefault("g", g)
        mcfg_raw.setdefault("k", k)
        if args.variant is not None:
            mcfg_raw["variant"] = args.variant
        if args.base_channels is not None:
            mcfg_raw["base_channels"] = args.base_channels
        if args.seed is not None:
            mcfg_raw["seed"] = args.seed
        mcfg = CUNetConfig(**mcfg_raw)
    except (TypeError, InvalidConfig) as e:
        raise CliError(EXIT_CONFIG, f"model config: {e}")
    if mcfg.g != g or mcfg.k != k:
        raise CliError(EXIT_DOMAIN, f"model config g/k ({mcfg.g},{mcfg.k}) "
                                    f"does not match samples ({g},{k})")

    model = build(mcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        best, final, _ = trainer.fit(model,
                                     trainer.samples_to_arrays(train_samples),
                                     trainer.samples_to_arrays(val_samples),
                                     tcfg, log_path=out / "epochs.csv",
                                     progress=_print_epoch if args.verbose else None)
    except NonFiniteLoss as e:
        raise CliError(EXIT_NUMERIC, str(e))
    trainer.save_checkpoint(best, out / "checkpoint")
    trainer.save_checkpoint(final, out / "checkpoint_final")
    _write_manifest(args.out, "train",
                    {"model": mcfg.to_dict(), "train": tcfg.to_dict()},
                    {"samples": args.samples, "out": args.out},
                    {"seed": tcfg.seed}, started)
    print(json.dumps({"best_epoch": best["epoch"],
                      "checkpoint": str(out / "checkpoint")}))
    return 0


def _print_epoch(row):
    print(f"epoch {row['epoch']}: train {row['train_loss']:.4f} "
          f"val {row['val_loss']:.4f} lr {row['lr']:.2g}", file=sys.stderr)


def _load_eval_model(checkpoint_dir, samples):
    manifest_path = Path(checkpoint_dir) / "manifest.json"
    try:
        manifest = _load_json(manifest_path, "checkpoint manifest")
    except CliError:
        raise
    g, k = _sample_dims(samples, "eval split")
    if manifest.get("oracle"):
        return None, manifest  # oracle stub: predictions read the targets
    ckpt = trainer.load_checkpoint(checkpoint_dir)
    if ckpt["model_config"]["g"] != g or ckpt["model_config"]["k"] != k:
        raise CliError(EXIT_DOMAIN,
                       f"checkpoint g/k ({ckpt['model_config']['g']},"
                       f"{ckpt['model_config']['k']}) does not match samples ({g},{k})")
    return trainer.restore_model(ckpt), manifest


def cmd_eval(args):
    started = time.monotonic()
    samples = ingest.load_samples(Path(args.samples) / args.split)
    model, manifest = _load_eval_model(args.checkpoint, samples)
    threshold = args.threshold
    if model is None:
        reports = [metrics.accuracy_metrics(s.v_post.bitmap, s.v_post.bitmap,
                                            s.v_pre.bitmap) for s in samples]
        agg = metrics.aggregate(reports)
    else:
        _, agg = metrics.evaluate_model(model, samples, threshold)
    csv_text = metrics.metrics_csv([(args.split, agg)])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(csv_text, encoding="utf-8")
    _write_manifest(out.parent, "eval", {"threshold": threshold},
                    {"checkpoint": args.checkpoint, "samples": args.samples,
                     "out": args.out}, {}, started)
    print(csv_text, end="")
    return 0


def _load_split_samples(samples_dir):
    return {name: ingest.load_samples(Path(samples_dir) / name)
            for name in ("train", "val", "test")}


def _model_train_configs(args, g, k):
    tcfg_raw = _load_json(args.train_config, "train config") if args.train_config else {}
    if args.seed is not None:
        tcfg_raw["seed"] = args.seed
    if args.epochs is not None:
        tcfg_raw["max_epochs"] = args.epochs
    mcfg_raw = _load_json(args.model_config, "model config") if args.model_config else {}
    mcfg_raw.setdefault("g", g)
    mcfg_raw.setdefault("k", k)
    if args.base_channels is not None:
        mcfg_raw["base_channels"] = args.base_channels
    if args.seed is not None:
        mcfg_raw["seed"] = args.seed
    try:
        return CUNetConfig(**mcfg_raw), trainer.TrainConfig(**tcfg_raw)
    except (TypeError, InvalidConfig) as e:
        raise CliError(EXIT_CONFIG, str(e))


def cmd_ablate(args):
    started = time.monotonic()
    splits = _load_split_samples(args.samples)
    g, k = _sample_dims(splits["train"], "train split")
    mcfg, tcfg = _model_train_configs(args, g, k)
    try:
        rows, checkpoints = metrics.ablation_harness(splits, mcfg, tcfg)
    except NonFiniteLoss as e:
        raise CliError(EXIT_NUMERIC, str(e))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(metrics.metrics_csv(rows), encoding="utf-8")
    for variant, ckpt in checkpoints.items():
        trainer.save_checkpoint(ckpt, out / f"checkpoint_{variant}")
    _write_manifest(args.out, "ablate",
                    {"model": mcfg.to_dict(), "train": tcfg.to_dict()},
                    {"samples": args.samples, "out": args.out},
                    {"seed": tcfg.seed}, started)
    print((out / "ablation.csv").read_text(), end="")
    return 0


def cmd_sensitivity(args):
    started = time.monotonic()
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad --sizes value {args.sizes!r}")
    if not sizes:
        raise CliError(EXIT_CONFIG, "--sizes is empty")
    try:
        icfg = ingest.IngestConfig.from_json(args.config) if args.config \
            else ingest.IngestConfig()
    except OSError as e:
        raise CliError(EXIT_IO, str(e))
    trajectories, pois, splits = _load_raw(args.raw, icfg)
    if any(g > min(icfg.world_m, icfg.world_n) for g in sizes):
        raise CliError(EXIT_DOMAIN, "a requested size exceeds the world dimensions")
    mcfg, tcfg = _model_train_configs(args, sizes[0], icfg.k)

    def split_fn(samples):
        return _split_samples(samples, splits)

    try:
        rows = metrics.crop_sensitivity_harness(trajectories, pois, icfg, sizes,
                                                mcfg, tcfg, split_fn)
    except NonFiniteLoss as e:
        raise CliError(EXIT_NUMERIC, str(e))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = metrics.metrics_csv([(str(g), r) for g, r in rows])
    (out / "sensitivity.csv").write_text(table, encoding="utf-8")
    _write_manifest(args.out, "sensitivity",
                    {"sizes": sizes, "model": mcfg.to_dict(), "train": tcfg.to_dict()},
                    {"raw": args.raw, "out": args.out}, {"seed": tcfg.seed}, started)
    print(table, end="")
    return 0


def cmd_pairs(args):
    started = time.monotonic()
    samples = ingest.load_samples(Path(args.samples) / args.split)
    pairs = metrics.find_similar_pairs(samples, args.pre_sim_min, args.sir_sim_max)
    results = []
    if pairs:
        by_uid = {s.user_id: s for s in samples}
        model = None
        if args.checkpoint:
            model, _ = _load_eval_model(args.checkpoint, samples)
        for uid_a, uid_b, pre_cos, sir_cos in pairs[: args.limit]:
            if model is not None:
                results.append(metrics.pair_divergence(model, by_uid[uid_a], by_uid[uid_b]))
            else:
                results.append(metrics.PairStudyResult(uid_a, uid_b, pre_cos,
                                                       sir_cos, float("nan")))
    csv_text = metrics.pairs_csv(results)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(csv_text, encoding="utf-8")
    _write_manifest(out.parent, "pairs",
                    {"pre_sim_min": args.pre_sim_min, "sir_sim_max": args.sir_sim_max},
                    {"samples": args.samples, "out": args.out}, {}, started)
    print(csv_text, end="")
    return 0


def _write_pgm(path, values) -> None:
    """8-bit binary PGM; values in [0,1] scale linearly to 0..255."""
    arr = np.asarray(values, dtype=np.float64)
    g = arr.shape[0]
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{g} {g}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def cmd_export_map(args):
    started = time.monotonic()
    samples = ingest.load_samples(Path(args.samples) / args.split)
    by_uid = {s.user_id: s for s in samples}
    if args.uid not in by_uid:
        raise CliError(EXIT_DOMAIN, f"uid {args.uid} not found in split {args.split!r}")
    sample = by_uid[args.uid]
    model, _ = _load_eval_model(args.checkpoint, samples)
    if model is None:
        prob = sample.v_post.bitmap.astype(np.float64)
    else:
        data = trainer.samples_to_arrays([sample])
        prob = trainer.predict(model, data)[0, 0].astype(np.float64)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_pgm(out / "pre.pgm", sample.v_pre.bitmap)
    _write_pgm(out / "post.pgm", sample.v_post.bitmap)
    _write_pgm(out / "predicted.pgm", prob)
    _write_pgm(out / "thresholded.pgm", metrics.binarize(prob, args.threshold))
    lines = ["i,j,probability"]
    g = prob.shape[0]
    for i in range(g):
        for j in range(g):
            lines.append(f"{i},{j},{prob[i, j]:.6f}")
    (out / "probabilities.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_manifest(args.out, "export-map", {"uid": args.uid},
                    {"checkpoint": args.checkpoint, "samples": args.samples,
                     "out": args.out}, {}, started)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftgrid",
                                     description="post-disruption movement prediction")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth_gen)

    p = sub.add_parser("prepare", help="derive per-individual samples")
    p.add_argument("--raw", required=True, help="directory with CSVs + splits.json")
    p.add_argument("--config", help="IngestConfig JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--samples", required=True)
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--w-max", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all five variants")
    p.add_argument("--samples", required=True)
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sensitivity", help="crop-size sensitivity study")
    p.add_argument("--raw", required=True)
    p.add_argument("--config", help="IngestConfig JSON")
    p.add_argument("--sizes", default="50,100,150")
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sensitivity)

    p = sub.add_parser("pairs", help="similar-pre / different-reliance pair study")
    p.add_argument("--samples", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint")
    p.add_argument("--pre-sim-min", type=float, default=0.3)
    p.add_argument("--sir-sim-max", type=float, default=0.5)
    p.add_argument("--limit", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pairs)

    p = sub.add_parser("export-map", help="export PGM panels for one individual")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--uid", type=int, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_map)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except InvalidConfig as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MalformedRow, OutOfRange, CropTooLarge, NoPreEventData,
            ShapeMismatch, ZeroVector) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
