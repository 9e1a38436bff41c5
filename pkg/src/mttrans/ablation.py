"""Component ablation sweep: train each configuration end-to-end and tabulate target mAP.

A configuration is the set of enabled components. Rows without the mean
teacher stop after burn-in and are scored with the burn-in student; rows with
it run the transfer stage and are scored with the final teacher (the student
score is kept alongside).

Burn-in only depends on the burn-in fields of the config, so configurations
that share them (source-only and mt-only, for instance) share one burn-in
checkpoint per seed. Training is deterministic, so this is identical to
training each row from scratch. The cache key covers the burn-in config, the
data and the package source, so any code change invalidates it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import DetectionDataset
from .errors import ConfigurationError
from .evaluation import evaluate_detector
from .provenance import code_hash
from .training import (
    TrainConfig, TrainReport, burn_in, init_transfer, load_student, save_detector, save_student, transfer_train,
)

logger = logging.getLogger(__name__)

COMPONENTS = ("mt", "dqfa-enc", "dqfa-dec", "bgpa", "tifa", "shared-qe")
_LAMBDA_FIELD = {"dqfa-enc": "lambda_dqfa_enc", "dqfa-dec": "lambda_dqfa_dec", "bgpa": "lambda_bgpa", "tifa": "lambda_tifa"}
# fields that only affect the transfer stage
TRANSFER_FIELDS = frozenset({
    "transfer_epochs", "lr_transfer", "lr_decay_epoch_transfer", "batch_size_transfer",
    "alpha", "tau", "mean_teacher", "share_queries",
})
SPLIT_DIRS = ("source_train", "target_train", "target_val")
# Full-scale mAP@0.5 (%) of the three core rows on the real foggy-weather benchmark.
# The desk benchmark is expected to reproduce their ordering, not their values.
FULL_SCALE_REFERENCE_MAP = {"source-only": 28.5, "mt-only": 35.843, "full": 43.413}


def parse_components(text: str | list[str]) -> frozenset[str]:
    items = text.split(",") if isinstance(text, str) else list(text)
    comps = [c.strip() for c in items if c.strip()]
    if not comps:
        raise ConfigurationError("--components: at least one component is required")
    unknown = sorted(set(comps) - set(COMPONENTS))
    if unknown:
        raise ConfigurationError(f"--components: unknown component(s) {', '.join(unknown)}; choose from {', '.join(COMPONENTS)}")
    return frozenset(comps)


@dataclass(frozen=True)
class AblationRow:
    name: str
    components: frozenset[str]


def _ordered(comps) -> list[str]:
    return [c for c in COMPONENTS if c in comps]


def sweep_rows(components: frozenset[str], leave_one_out: bool = True) -> list[AblationRow]:
    """source-only, mt-only, full, then full minus each component (duplicates dropped)."""
    rows = [AblationRow("source-only", frozenset())]
    if "mt" in components:
        rows.append(AblationRow("mt-only", frozenset(c for c in ("mt", "shared-qe") if c in components)))
    rows.append(AblationRow("full", frozenset(components)))
    if leave_one_out:
        for c in _ordered(components):
            rows.append(AblationRow(f"full w/o {c}", frozenset(components - {c})))
    seen, unique = set(), []
    for r in rows:
        if r.components not in seen:
            seen.add(r.components)
            unique.append(r)
    return unique


def row_config(base: TrainConfig, components: frozenset[str], seed: int) -> TrainConfig:
    """Enabled alignment heads keep the base weight (1.0 if the base has it at zero)."""
    changes = {"seed": seed, "mean_teacher": "mt" in components, "share_queries": "shared-qe" in components}
    for comp, name in _LAMBDA_FIELD.items():
        changes[name] = (getattr(base, name) or 1.0) if comp in components else 0.0
    return base.replace(**changes)


def burn_in_key(config: TrainConfig, data_tag: str) -> str:
    values = {k: v for k, v in config.to_dict().items() if k not in TRANSFER_FIELDS}
    blob = json.dumps({"config": values, "data": data_tag, "code": code_hash()}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def data_tag(data_root: str | Path) -> str:
    h = hashlib.sha256()
    for split in SPLIT_DIRS:
        h.update((Path(data_root) / split / "manifest.json").read_bytes())
    return h.hexdigest()


def load_splits(data_root: str | Path) -> tuple[DetectionDataset, DetectionDataset, DetectionDataset]:
    root = Path(data_root)
    return tuple(DetectionDataset.load(root / s / "manifest.json") for s in SPLIT_DIRS)


@dataclass
class RowResult:
    row: str
    components: list[str]
    seed: int
    map: float
    student_map: float
    teacher_map: float | None
    burn_in_map: float
    mid_teacher_precision: float | None = None
    mid_student_precision: float | None = None
    queries_bit_equal: bool | None = None
    seconds: float = 0.0


def _midpoint_target_record(report: TrainReport):
    targets = [r for r in report.records if r.domain == "target"]
    if not targets:
        return None
    mid = len(report.records) / 2
    return min(targets, key=lambda r: (abs(r.epoch + 0.5 - mid), r.epoch))


def _run_group(args) -> list[RowResult]:
    """One seed, one shared burn-in, every row built on top of it."""
    base, seed, rows, data_root, out, threads = args
    torch.set_num_threads(threads)
    source, target, val = load_splits(data_root)
    out = Path(out)
    results = []
    first_cfg = row_config(base, rows[0].components, seed)
    ckpt = out / "cache" / f"burn_in-{burn_in_key(first_cfg, data_tag(data_root))}-seed{seed}.ckpt"
    t0 = time.perf_counter()
    if ckpt.exists():
        logger.info("reusing burn-in checkpoint %s", ckpt)
    else:
        state, _ = burn_in(first_cfg, source, target, report_path=_fresh(out / "cache" / f"{ckpt.stem}.jsonl"))
        save_student(ckpt, state)
    burn_seconds = time.perf_counter() - t0
    for row in rows:
        t1 = time.perf_counter()
        cfg = row_config(base, row.components, seed)
        state = load_student(ckpt, cfg)
        burn_map = evaluate_detector(state.detector, val).map
        row_dir = out / row.name.replace(" ", "_").replace("/", "") / f"seed{seed}"
        row_dir.mkdir(parents=True, exist_ok=True)
        res = RowResult(row.name, _ordered(row.components), seed, burn_map, burn_map, None, burn_map)
        if cfg.mean_teacher and cfg.transfer_epochs > 0:
            pair, state = init_transfer(state, cfg)
            report = transfer_train(pair, state, source, target, val, report_path=_fresh(row_dir / "report.jsonl"))
            save_student(row_dir / "student.ckpt", state)
            save_detector(row_dir / "teacher.ckpt", pair.teacher, cfg, state.categories)
            last = report.records[-1]
            res.student_map, res.teacher_map = last.val_map, last.teacher_val_map
            res.map = last.teacher_val_map
            mid = _midpoint_target_record(report)
            if mid is not None:
                res.mid_teacher_precision, res.mid_student_precision = mid.teacher_precision, mid.student_precision
            res.queries_bit_equal = all(r.queries_bit_equal for r in report.records)
        res.seconds = time.perf_counter() - t1 + (burn_seconds if row is rows[0] else 0.0)
        (row_dir / "result.json").write_text(json.dumps(dataclasses.asdict(res), indent=1))
        logger.info("%s seed %d: mAP %.4f (%.0fs)", row.name, seed, res.map, res.seconds)
        results.append(res)
    return results


def _fresh(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.unlink(missing_ok=True)
    return path


@dataclass
class AblationTable:
    rows: list[AblationRow]
    seeds: list[int]
    results: list[RowResult] = field(default_factory=list)

    def per_row(self, name: str) -> list[RowResult]:
        return sorted((r for r in self.results if r.row == name), key=lambda r: r.seed)

    def median(self, name: str) -> float:
        return statistics.median(r.map for r in self.per_row(name))

    def to_text(self) -> str:
        width = max(len(r.name) for r in self.rows)
        head = f"{'configuration':<{width}}  " + "  ".join(f"seed{s:<3d}" for s in self.seeds) + "  median mAP@0.5"
        lines = [head, "-" * len(head)]
        for row in self.rows:
            vals = "  ".join(f"{100 * r.map:7.2f}" for r in self.per_row(row.name))
            lines.append(f"{row.name:<{width}}  {vals}  {100 * self.median(row.name):7.2f}")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "seeds": self.seeds,
            "rows": [{"name": r.name, "components": _ordered(r.components), "median_map": self.median(r.name)} for r in self.rows],
            "results": [dataclasses.asdict(r) for r in self.results],
        }


def run_ablation(components: frozenset[str], base: TrainConfig, seeds: list[int], data_root: str | Path,
                 out: str | Path, parallel: int = 1, leave_one_out: bool = True,
                 rows: list[AblationRow] | None = None) -> AblationTable:
    """Train every row for every seed; ``parallel`` > 1 runs independent seed/burn-in groups in worker processes."""
    rows = rows or sweep_rows(components, leave_one_out)
    if not seeds:
        raise ConfigurationError("at least one seed is required")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tag = data_tag(data_root)
    groups: dict[tuple[str, int], list[AblationRow]] = {}
    for seed in seeds:
        for row in rows:
            groups.setdefault((burn_in_key(row_config(base, row.components, seed), tag), seed), []).append(row)
    jobs = [(base, seed, group, str(data_root), str(out), 1 if parallel > 1 else torch.get_num_threads())
            for (_, seed), group in groups.items()]
    table = AblationTable(rows, list(seeds))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for res in pool.map(_run_group, jobs):
                table.results += res
    else:
        for job in jobs:
            table.results += _run_group(job)
    (out / "ablation.json").write_text(json.dumps(table.to_json(), indent=1))
    (out / "table.txt").write_text(table.to_text() + "\n")
    return table
