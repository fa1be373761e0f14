"""Command-line entry point: ``strokeseg synth|train|eval|stats|benchmark``.

Settings resolve as command-line flag, then the JSON config file given with
``--config``, then built-in defaults. ``STROKESEG_DATA`` supplies the
dataset root when ``--data`` is omitted.

Exit status: 0 success, 2 usage error, 3 input/output error, 4 numerical
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .checkpoint import load_checkpoint
from .data import (
    PhantomConfig,
    Protocol2D,
    SplitError,
    VolumeFormatError,
    generate_phantom,
    load_manifest,
    load_split,
    split_subjects,
    write_subject,
)
from .metrics import MetricsReport
from .models import VARIANTS, VARIANTS_2D, VARIANTS_3D, ModelSpec, build_model
from .report import boxplot_svg, metrics_rows_csv, metrics_table, scatter_svg
from .stats import PairedVolumes, stats_csv, stats_table, volume_report
from .train import TrainConfig, evaluate, train

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
DATA_ENV = "STROKESEG_DATA"

# training lengths used by the benchmark unless the config file overrides them
BENCHMARK_EPOCHS = {"2d": 8, "3d": 12}

log = logging.getLogger("strokeseg")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    unknown = set(cfg) - {"model", "train", "data"}
    if unknown:
        raise UsageError(f"unknown config sections: {', '.join(sorted(unknown))}")
    return cfg


def _pick(flag, section: dict, key: str, default):
    if flag is not None:
        return flag
    return section.get(key, default)


def _data_root(args) -> Path:
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"no dataset given; pass --data or set {DATA_ENV}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    return root


def _protocol(data_cfg: dict) -> Protocol2D | None:
    """Explicit 2-D protocol from the config, or None to derive it from the slices."""
    if "crop_box" not in data_cfg and "slice_size" not in data_cfg:
        return None
    box = data_cfg.get("crop_box")
    return Protocol2D(tuple(box) if box else None, int(data_cfg.get("slice_size", 192)),
                      float(data_cfg.get("lesion_threshold", 0.001)))


def _default_protocol(root: Path, manifest) -> Protocol2D:
    from .data import read_subject

    ext = read_subject(root, manifest.train[0]).extents
    if ext[0] >= 190 and ext[1] >= 220:
        return Protocol2D()
    if ext[0] != ext[1]:
        raise UsageError(f"axial slices {ext[:2]} are not square; set data.slice_size and data.crop_box")
    return Protocol2D(None, ext[0])


def _datasets(root: Path, variant: str, data_cfg: dict, splits):
    manifest = load_manifest(root)
    is_3d = variant in VARIANTS_3D
    protocol = _protocol(data_cfg) or (None if is_3d else _default_protocol(root, manifest))
    extents = tuple(data_cfg["extents_3d"]) if data_cfg.get("extents_3d") else None
    out = [load_split(root, s, 3 if is_3d else 2, protocol, extents, manifest) for s in splits]
    meta = {"protocol": None if protocol is None else
            {"crop_box": list(protocol.box) if protocol.box else None, "slice_size": protocol.size,
             "lesion_threshold": protocol.threshold},
            "extents_3d": list(out[0].images.shape[2:]) if is_3d else None}
    return out, meta


def _train_config(args, train_cfg: dict, defaults: dict | None = None) -> TrainConfig:
    d = dict(defaults or {})
    d.update(train_cfg)
    for key in ("epochs", "batch_size", "lr", "scheduler", "seed"):
        flag = getattr(args, key, None)
        if flag is not None:
            d[key] = flag
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _spec(variant: str, model_cfg: dict, width_scale, extents) -> ModelSpec:
    kw = {k: v for k, v in model_cfg.items() if k in ("dropout", "norm", "heads")}
    return ModelSpec(variant, width_scale=_pick(width_scale, model_cfg, "width_scale", 1),
                     input_extents=tuple(extents), **kw)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.subjects < 5:
        raise UsageError(f"need at least 5 subjects, got {args.subjects}")
    extents = tuple(args.extents)
    # small grids get proportionally smaller lesions
    lo, hi = PhantomConfig.lesion_radius_mm
    hi = min(hi, 0.8 * PhantomConfig.brain_fraction * min(extents))
    radii = (min(lo, hi), hi)
    try:
        PhantomConfig(extents=extents, lesion_radius_mm=radii)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(args.subjects):
        sid = f"sub-{i:04d}"
        cfg = PhantomConfig(seed=args.seed * 100_003 + i, extents=extents, lesion_radius_mm=radii)
        write_subject(out, generate_phantom(cfg, sid))
        ids.append(sid)
    manifest = split_subjects(ids, args.seed)
    manifest.save(out / "manifest.json")
    print(f"wrote {len(ids)} subjects to {out} "
          f"({len(manifest.train)}/{len(manifest.validation)}/{len(manifest.test)} train/validation/test)")
    return EXIT_OK


def _run_training(variant: str, root: Path, cfg: dict, width_scale, seed, out: Path, args,
                  resume: bool = False, train_defaults: dict | None = None) -> Path:
    data_cfg = cfg.get("data", {})
    (train_ds, val_ds), meta = _datasets(root, variant, data_cfg, ("train", "validation"))
    tcfg = _train_config(args, cfg.get("train", {}), train_defaults)
    if seed is not None:
        tcfg.seed = seed
    spec = _spec(variant, cfg.get("model", {}), width_scale, train_ds.images.shape[2:])
    run_dir = out / variant / str(tcfg.seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    last = run_dir / "last.ckpt"
    if resume and not last.exists():
        raise FileNotFoundError(f"nothing to resume: {last} does not exist")
    model = build_model(spec, tcfg.seed)
    log.info("training %s (%d parameters) on %d samples", variant,
             sum(t.size for t in model.parameters().values()), len(train_ds))
    train(model, train_ds, val_ds, tcfg, run_dir=run_dir, resume=last if resume else None,
          log=log.info, meta=meta)
    return run_dir


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    run_dir = _run_training(args.model, _data_root(args), cfg, args.width_scale, args.seed,
                            Path(args.out), args, resume=args.resume)
    print(f"checkpoints and train_record.csv written to {run_dir}")
    return EXIT_OK


def _evaluate_checkpoint(ckpt_path: Path, root: Path, split: str, threshold: float | None):
    ckpt = load_checkpoint(ckpt_path)
    meta = ckpt.extra.get("meta", {})
    model = ckpt.model
    data_cfg = {}
    if meta.get("protocol"):
        data_cfg.update({k: v for k, v in meta["protocol"].items()})
    if meta.get("extents_3d"):
        data_cfg["extents_3d"] = meta["extents_3d"]
    (ds,), _ = _datasets(root, model.spec.variant, data_cfg, (split,))
    if threshold is None:
        threshold = ckpt.extra.get("config", {}).get("threshold", 0.5)
    return model, evaluate(model, ds, threshold)


def _write_eval(out: Path, model_id: str, report: MetricsReport) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "summary.txt").write_text(report.summary(model_id))
    if report.volumes is not None:
        (out / "volumes.csv").write_text(report.volumes.to_csv())


def cmd_eval(args) -> int:
    if args.split == "train" and not args.allow_train_split:
        raise UsageError("evaluating on the training split needs --allow-train-split")
    ckpt_path = Path(args.model_ckpt)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint {ckpt_path} does not exist")
    model, report = _evaluate_checkpoint(ckpt_path, _data_root(args), args.split, args.threshold)
    out = Path(args.out) if args.out else ckpt_path.parent / f"eval-{args.split}"
    _write_eval(out, model.spec.variant, report)
    print(report.summary(model.spec.variant), end="")
    return EXIT_OK


def _stats_outputs(out: Path, reports) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.csv").write_text(stats_csv(reports))
    (out / "stats.txt").write_text(stats_table(reports))
    (out / "scatter.svg").write_text(scatter_svg(reports))
    (out / "boxplot.svg").write_text(boxplot_svg(reports))


def cmd_stats(args) -> int:
    paths = [Path(p) for p in args.volumes]
    ids = args.model_id or [p.parent.name if p.stem == "volumes" else p.stem for p in paths]
    if len(ids) != len(paths):
        raise UsageError("give one --model-id per volumes file")
    reports = []
    for mid, p in zip(ids, paths):
        rep = volume_report(mid, PairedVolumes.from_csv(p.read_text()), args.alternative)
        for note in rep.notes:
            print(f"{mid}: {note}", file=sys.stderr)
        reports.append(rep)
    _stats_outputs(Path(args.out), reports)
    print(stats_table(reports), end="")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    root = _data_root(args)
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, reports, failures = [], [], []
    for variant in args.models or VARIANTS:
        t0 = time.perf_counter()
        key = "3d" if variant in VARIANTS_3D else "2d"
        try:
            run_dir = _run_training(variant, root, cfg, args.scale, args.seed, out / "runs", args,
                                    train_defaults={"epochs": BENCHMARK_EPOCHS[key],
                                                    "scheduler": "cosine_annealing"})
            model, report = _evaluate_checkpoint(run_dir / "best.ckpt", root, "test", None)
        except (NumericError, ValueError) as e:
            log.error("%s failed: %s", variant, e)
            failures.append((variant, e))
            rows.append((variant, None))
            continue
        _write_eval(out / "eval" / variant, variant, report)
        rows.append((variant, report.mean()))
        if report.volumes is not None:
            reports.append(volume_report(variant, report.volumes))
        log.info("%s done in %.1f s", variant, time.perf_counter() - t0)

    two_d = [r for r in rows if r[0] in VARIANTS_2D]
    three_d = [r for r in rows if r[0] in VARIANTS_3D]
    text = metrics_table(two_d, "Performance metrics, 2-D models (test split, macro mean)")
    text += "\n" + metrics_table(three_d, "Performance metrics, 3-D models (test split, macro mean)")
    (out / "metrics.csv").write_text(metrics_rows_csv(rows))
    if reports:
        _stats_outputs(out, reports)
        text += "\nSigned-rank and Pearson tests, actual vs predicted lesion volume\n" + stats_table(reports)
    for variant, e in failures:
        text += f"\n{variant} failed: {e}\n"
    (out / "report.txt").write_text(text)
    print(text, end="")
    if failures:
        return EXIT_NUMERIC if any(isinstance(e, NumericError) for _, e in failures) else EXIT_ERROR
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strokeseg", description="Stroke lesion segmentation benchmark tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic phantom dataset")
    s.add_argument("--subjects", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--extents", type=int, nargs=3, default=(48, 48, 32), metavar=("X", "Y", "Z"))
    s.set_defaults(func=cmd_synth)

    def training_flags(q):
        q.add_argument("--data", help=f"dataset root (default: ${DATA_ENV})")
        q.add_argument("--config", help="JSON file with model/train/data sections")
        q.add_argument("--seed", type=int)
        q.add_argument("--epochs", type=int)
        q.add_argument("--batch-size", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--scheduler", choices=("reduce_on_plateau", "cosine_annealing"))

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--model", required=True, choices=VARIANTS, metavar="VARIANT",
                   help="one of: " + ", ".join(VARIANTS))
    t.add_argument("--out", required=True)
    t.add_argument("--width-scale", type=float)
    t.add_argument("--resume", action="store_true", help="continue from <out>/<model>/<seed>/last.ckpt")
    training_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--model-ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--split", default="test", choices=("train", "validation", "test"))
    e.add_argument("--allow-train-split", action="store_true")
    e.add_argument("--threshold", type=float)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    st = sub.add_parser("stats", help="signed-rank and Pearson tests on paired volumes")
    st.add_argument("--volumes", required=True, nargs="+", help="volumes.csv files written by eval")
    st.add_argument("--model-id", nargs="+")
    st.add_argument("--alternative", default="two-sided", choices=("two-sided", "greater", "less"))
    st.add_argument("--out", required=True)
    st.set_defaults(func=cmd_stats)

    b = sub.add_parser("benchmark", help="train and evaluate all eight variants")
    b.add_argument("--scale", type=float, default=8, help="width divisor (default 8)")
    b.add_argument("--out", required=True)
    b.add_argument("--models", nargs="+", choices=VARIANTS, metavar="VARIANT")
    training_flags(b)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, SplitError) as e:
        print(f"strokeseg {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, VolumeFormatError) as e:
        print(f"strokeseg {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"strokeseg {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
