"""Command-line entry point: ``mttrans <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .ablation import COMPONENTS, parse_components, run_ablation
from .data import DetectionDataset, ShiftConfig, generate_synthetic_dataset, manifest_to_dict
from .errors import ConfigurationError, MTTransError, UsageError
from .evaluation import evaluate_detector
from .mean_teacher import generate_pseudo_labels
from .provenance import code_hash, write_stamp
from .training import (
    TrainConfig, burn_in, format_config, init_transfer, load_config, load_detector, save_detector,
    save_student, transfer_train,
)
from .visualize import write_overlays

logger = logging.getLogger("mttrans")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


# ---------------------------------------------------------------------------
# argument types


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _image_size(text: str) -> int:
    v = _positive_int(text)
    if v % 32:
        raise argparse.ArgumentTypeError(f"must be a multiple of 32, got {v}")
    return v


def _float_in(lo: float, hi: float):
    def parse(text: str) -> float:
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
        if not lo <= v <= hi:
            raise argparse.ArgumentTypeError(f"must be in [{lo:g}, {hi:g}], got {v:g}")
        return v
    return parse


def _color_shift(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated offsets, got {text!r}")
    return tuple(_float_in(-0.3, 0.3)(p) for p in parts)


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _existing_file(text: str) -> Path:
    p = Path(text)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {text}")
    return p


def _manifest(text: str) -> Path:
    p = Path(text)
    p = p / "manifest.json" if p.is_dir() else p
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"no manifest at {text}")
    return p


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    """One ``--field-name`` override per TrainConfig field; unset flags defer to the config file."""
    p.add_argument("--config", type=_existing_file, help="flat 'key = value' training config file")
    g = p.add_argument_group("training config overrides")
    for f in dataclasses.fields(TrainConfig):
        kind = _bool if isinstance(f.default, bool) else type(f.default)
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=kind, default=None,
                       metavar=kind.__name__.lstrip("_").upper())
    p.add_argument("--threads", type=_positive_int, default=1, help="torch CPU threads (default 1, deterministic)")


def _train_config(args) -> TrainConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    shift = ShiftConfig(args.fog, args.color_shift, args.blur, args.seed)
    out = Path(args.out)
    manifests = generate_synthetic_dataset(args.n_source, args.n_target, args.n_val, args.image_size, args.classes,
                                           shift, args.seed, out)
    for m in manifests:
        print(m.path)
    write_stamp(out, "gen-data", args.seed, {
        "n_source": args.n_source, "n_target": args.n_target, "n_val": args.n_val, "image_size": args.image_size,
        "classes": args.classes, "fog": args.fog, "color_shift": list(args.color_shift), "blur": args.blur,
    })
    return EXIT_OK


def _write_report_summary(out: Path, report) -> None:
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=1) + "\n")


def cmd_burn_in(args) -> int:
    cfg = _train_config(args)
    source = DetectionDataset.load(args.source)
    target = DetectionDataset.load(args.target) if args.target else None
    val = DetectionDataset.load(args.val) if args.val else None
    if cfg.alignment_weights.any and target is None:
        raise ConfigurationError("--target is required when any alignment weight is non-zero")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.jsonl"
    report_path.unlink(missing_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    write_stamp(out, "burn-in", cfg.seed, cfg.to_dict())
    state, report = burn_in(cfg, source, target, val, report_path=report_path, checkpoint_path=out / "student.ckpt")
    _write_report_summary(out, report)
    last = report.records[-1] if report.records else None
    print(f"checkpoint: {out / 'student.ckpt'}")
    if last is not None:
        print(f"epochs={len(report.records)} final_det_loss={last.det_loss_src:.4f} val_map={last.val_map}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _train_config(args)
    if not cfg.mean_teacher:
        raise ConfigurationError("transfer needs mean_teacher = true")
    source = DetectionDataset.load(args.source)
    target = DetectionDataset.load(args.target)
    val = DetectionDataset.load(args.val) if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.jsonl"
    report_path.unlink(missing_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    write_stamp(out, "transfer", cfg.seed, cfg.to_dict(), {"init": str(args.init)})
    pair, state = init_transfer(args.init, cfg)
    report = transfer_train(pair, state, source, target, val, report_path=report_path)
    save_student(out / "student.ckpt", state)
    save_detector(out / "teacher.ckpt", pair.teacher, cfg, state.categories)
    _write_report_summary(out, report)
    _write_pseudo_labels(out / "pseudo_labels.json", pair.teacher, target, cfg.tau)
    s = report.summary()
    print(f"student: {out / 'student.ckpt'}\nteacher: {out / 'teacher.ckpt'}")
    print(f"schedule={s['domains']} ema_updates={s['ema_updates']} "
          f"val_map={s['final_val_map']} teacher_val_map={s['final_teacher_val_map']}")
    return EXIT_OK


@torch.no_grad()
def _write_pseudo_labels(path: Path, teacher, target: DetectionDataset, tau: float) -> None:
    """Final teacher's pseudo labels on the (unaugmented) target-train split, manifest-shaped."""
    teacher.eval()
    labels = []
    for batch, _ in target.batches(50, shuffle=False):
        out = teacher(batch.pixels).decoder
        labels += [generate_pseudo_labels(out.row(i), tau, img) for i, img in enumerate(batch.image_ids)]
    manifest = target.manifest
    pseudo = dataclasses.replace(manifest, records=[dataclasses.replace(r, annotations=a)
                                                    for r, a in zip(manifest.records, labels)])
    doc = manifest_to_dict(pseudo, with_scores=True)
    doc["threshold_used"] = labels[0].threshold_used if labels else tau
    path.write_text(json.dumps(doc, indent=1))


def cmd_eval(args) -> int:
    detector, _ = load_detector(args.ckpt)
    data = DetectionDataset.load(args.data)
    result = evaluate_detector(detector, data, args.iou_thresh)
    print(result.to_text(per_class=args.per_class))
    if args.out:
        out = Path(args.out)
        write_stamp(out, "eval", args.seed, {"ckpt": str(args.ckpt), "data": str(args.data), "iou_thresh": args.iou_thresh})
        (out / "eval.json").write_text(json.dumps({"map": result.map, "ap": {str(k): v for k, v in result.ap.items()},
                                                   "iou_thresh": result.iou_thresh}, indent=1))
    return EXIT_OK


def cmd_ablate(args) -> int:
    components = parse_components(args.components)
    base = load_config(args.config)
    out = Path(args.out)
    write_stamp(out, "ablate", args.seeds[0], base.to_dict(),
                {"components": sorted(components), "seeds": args.seeds, "rows": args.rows})
    table = run_ablation(components, base, args.seeds, args.data_root, out, args.parallel,
                         leave_one_out=args.rows == "all")
    print(table.to_text())
    return EXIT_OK


def cmd_visualize(args) -> int:
    student, _ = load_detector(args.ckpt)
    teacher, _ = load_detector(args.teacher_ckpt)
    data = DetectionDataset.load(args.data)
    out = Path(args.out)
    records = write_overlays(student, teacher, data, out, args.n_images, args.tau, args.seed)
    write_stamp(out, "visualize", args.seed, {"ckpt": str(args.ckpt), "teacher_ckpt": str(args.teacher_ckpt),
                                              "data": str(args.data), "n_images": args.n_images, "tau": args.tau})
    for r in records:
        print(out / r.file)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mttrans", description="Mean-teacher domain-adaptive detection transformer at desk scale.")
    parser.add_argument("--version", action="version", version=f"mttrans {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic source/target benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=_image_size, default=64)
    p.add_argument("--classes", type=_positive_int, default=5)
    p.add_argument("--n-source", type=_positive_int, default=200)
    p.add_argument("--n-target", type=_positive_int, default=200)
    p.add_argument("--n-val", type=_positive_int, default=100)
    p.add_argument("--fog", type=_float_in(0.0, 1.0), default=ShiftConfig.fog_intensity)
    p.add_argument("--color-shift", type=_color_shift, default=ShiftConfig.color_shift, metavar="R,G,B")
    p.add_argument("--blur", type=_float_in(0.0, float("inf")), default=ShiftConfig.blur_radius)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("burn-in", help="supervised source training with adversarial alignment")
    p.add_argument("--source", type=_manifest, required=True)
    p.add_argument("--target", type=_manifest)
    p.add_argument("--val", type=_manifest, help="target-val split scored after every epoch")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_burn_in)

    p = sub.add_parser("transfer", help="mean-teacher transfer from a burn-in checkpoint")
    p.add_argument("--source", type=_manifest, required=True)
    p.add_argument("--target", type=_manifest, required=True)
    p.add_argument("--val", type=_manifest)
    p.add_argument("--init", type=_existing_file, required=True, help="burn-in student checkpoint")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="mAP of a checkpoint on a split")
    p.add_argument("--ckpt", type=_existing_file, required=True)
    p.add_argument("--data", type=_manifest, required=True)
    p.add_argument("--iou-thresh", type=_float_in(0.0, 1.0), default=0.5)
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write eval.json and a stamp here")
    p.add_argument("--threads", type=_positive_int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="component ablation sweep (target-val mAP@0.5 per configuration)")
    p.add_argument("--components", required=True, help=f"comma-separated subset of {','.join(COMPONENTS)}")
    p.add_argument("--config", type=_existing_file)
    p.add_argument("--data-root", required=True, help="directory holding source_train/target_train/target_val")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_seed_list, default=[0], help="comma-separated training seeds (default 0)")
    p.add_argument("--rows", choices=("core", "all"), default="all",
                   help="core: source-only, mt-only, full; all: plus leave-one-out rows")
    p.add_argument("--parallel", type=_positive_int, default=1, help="worker processes (default 1)")
    p.add_argument("--threads", type=_positive_int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="overlay GT, student detections and teacher pseudo labels")
    p.add_argument("--ckpt", type=_existing_file, required=True, help="student checkpoint")
    p.add_argument("--teacher-ckpt", type=_existing_file, required=True)
    p.add_argument("--data", type=_manifest, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=_positive_int, default=4)
    p.add_argument("--tau", type=_float_in(0.0, 0.999999), default=TrainConfig.tau)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "threads", None):
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MTTransError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
