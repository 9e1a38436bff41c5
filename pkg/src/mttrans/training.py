"""Two-step training: supervised burn-in on source, then mean-teacher transfer.

Burn-in minimizes ``det(source) - adv`` with the gradient reversal layers
turning that single minimization into the detector/discriminator min-max.
Transfer alternates whole epochs between the domains: source epochs repeat the
burn-in objective, target epochs replace ground truth with teacher pseudo
labels, and the teacher takes one EMA step after every source epoch.
"""

from __future__ import annotations

import ast
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .alignment import HEADS, Alignment, AlignmentWeights, adv_loss
from .checkpoint import load_checkpoint, load_module, load_optimizer, module_tensors, optimizer_tensors, save_checkpoint
from .data import AnnotationSet, DetectionDataset, Domain, ImageBatch, augment_weak, strong_photometric
from .detector import Detector, DetectorConfig, detection_loss
from .errors import ConfigurationError
from .evaluation import evaluate_detector, pseudo_label_quality
from .mean_teacher import MeanTeacherPair, generate_pseudo_labels

logger = logging.getLogger(__name__)

# RNG stream ids, so that every random draw has its own reproducible source
_SRC_ORDER, _TGT_ORDER, _AUG = 1, 2, 3
_BURN_IN, _TRANSFER = 0, 1


@dataclass
class TrainConfig:
    burn_in_epochs: int = 12
    transfer_epochs: int = 8
    lr_burn_in: float = 2e-4
    lr_transfer: float = 2e-6
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 10
    lr_decay_epoch_transfer: int = 4
    batch_size_burn_in: int = 4
    batch_size_transfer: int = 2
    alpha: float = 0.999
    tau: float = 0.5
    lambda_dqfa_enc: float = 1.0
    lambda_dqfa_dec: float = 1.0
    lambda_bgpa: float = 1.0
    lambda_tifa: float = 1.0
    lambda_grl: float = 1.0
    seed: int = 0
    mean_teacher: bool = True
    share_queries: bool = True
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    n_prototypes: int = 9
    d_model: int = 128
    n_heads: int = 8
    n_enc: int = 3
    n_dec: int = 3
    n_queries: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr_burn_in <= 0 or self.lr_transfer <= 0:
            raise ConfigurationError("learning rates must be > 0")
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau must be in (0, 1), got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.burn_in_epochs < 0 or self.transfer_epochs < 0:
            raise ConfigurationError("epoch counts must be >= 0")
        if self.batch_size_burn_in < 1 or self.batch_size_transfer < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        for name in ("lambda_dqfa_enc", "lambda_dqfa_dec", "lambda_bgpa", "lambda_tifa", "lambda_grl"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v}")

    @property
    def alignment_weights(self) -> AlignmentWeights:
        return AlignmentWeights(self.lambda_dqfa_enc, self.lambda_dqfa_dec, self.lambda_bgpa, self.lambda_tifa)

    def detector_config(self, n_classes: int) -> DetectorConfig:
        return DetectorConfig(self.d_model, self.n_heads, self.n_enc, self.n_dec, self.n_queries, n_classes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
        coerced = {}
        for k, v in values.items():
            default = known[k].default
            try:
                if isinstance(default, bool):
                    if isinstance(v, str):
                        if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
                            raise ValueError(v)
                        v = v.lower() in ("true", "1", "yes")
                    coerced[k] = bool(v)
                elif isinstance(default, int):
                    if isinstance(v, float) and not v.is_integer():
                        raise ValueError(v)
                    coerced[k] = int(v)
                else:
                    coerced[k] = float(v)
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"config key {k}: cannot interpret {v!r}") from exc
        return cls(**coerced)


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> TrainConfig:
    """Built-in defaults, then the config file, then explicit overrides."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(values)


def format_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in config.to_dict().items())


# ---------------------------------------------------------------------------
# reports


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    domain: str
    lr: float
    det_loss_src: float = 0.0
    det_loss_tgt: float = 0.0
    head_losses: dict = field(default_factory=dict)
    adv_loss: float = 0.0
    objective: float = 0.0
    n_pseudo: int = 0
    mean_pseudo_score: float | None = None
    teacher_precision: float | None = None
    student_precision: float | None = None
    val_map: float | None = None
    teacher_val_map: float | None = None
    ema_updates: int = 0
    queries_bit_equal: bool | None = None
    warning: str | None = None
    seconds: float = 0.0


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    wall_seconds: float = 0.0

    def append(self, rec: EpochRecord, path: str | Path | None = None) -> None:
        last = self.records[-1] if self.records else None
        if last is not None and last.stage == rec.stage and rec.epoch <= last.epoch:
            raise ValueError("epoch indices must increase within a stage")
        self.records.append(rec)
        if path is not None:
            with open(path, "a") as f:
                f.write(json.dumps(dataclasses.asdict(rec), sort_keys=True) + "\n")

    @property
    def domains(self) -> list[str]:
        return [r.domain for r in self.records]

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "epochs": len(self.records),
            "domains": "".join("S" if d == "source" else "T" for d in self.domains),
            "final_val_map": None if last is None else last.val_map,
            "final_teacher_val_map": None if last is None else last.teacher_val_map,
            "ema_updates": None if last is None else last.ema_updates,
            "wall_seconds": self.wall_seconds,
        }

    @classmethod
    def read(cls, path: str | Path) -> "TrainReport":
        recs = [EpochRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
        return cls(recs)


def objective_report(det_src: float, det_tgt: float, adv: float) -> float:
    """Bookkeeping value of the full objective: det(src) + det(tgt) - adv."""
    return float(det_src) + float(det_tgt) - float(adv)


# ---------------------------------------------------------------------------
# model state


@dataclass
class StudentState:
    detector: Detector
    alignment: Alignment
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    categories: list[str]
    next_epoch: int = 0
    stage: str = "burn_in"

    def param_names(self) -> dict[int, str]:
        names = {id(p): f"model.{n}" for n, p in self.detector.named_parameters()}
        names.update({id(p): f"align.{n}" for n, p in self.alignment.named_parameters()})
        return names

    def set_lr(self, lr: float) -> None:
        for g in self.optimizer.param_groups:
            g["lr"] = lr


def _make_optimizer(detector, alignment, lr: float, weight_decay: float):
    params = list(detector.parameters()) + list(alignment.parameters())
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def init_student(config: TrainConfig, n_classes: int, categories: list[str] | None = None) -> StudentState:
    torch.manual_seed(config.seed)
    detector = Detector(config.detector_config(n_classes))
    alignment = Alignment(config.d_model, config.n_prototypes, config.alignment_weights, config.lambda_grl)
    opt = _make_optimizer(detector, alignment, config.lr_burn_in, config.weight_decay)
    return StudentState(detector, alignment, opt, config, list(categories or [str(i) for i in range(n_classes)]))


def _header(config: TrainConfig, det_cfg: DetectorConfig, categories, **meta) -> dict:
    return {"train": config.to_dict(), "detector": det_cfg.to_dict(), "categories": list(categories), **meta}


def save_student(path, state: StudentState) -> Path:
    tensors = module_tensors(state.detector, "model")
    tensors.update(module_tensors(state.alignment, "align"))
    tensors.update(optimizer_tensors(state.optimizer, state.param_names()))
    header = _header(state.config, state.detector.config, state.categories)
    return save_checkpoint(path, tensors, header, state.config.seed, {"role": "student", "stage": state.stage, "next_epoch": state.next_epoch})


def save_detector(path, detector: Detector, config: TrainConfig, categories, role: str = "teacher") -> Path:
    header = _header(config, detector.config, categories)
    return save_checkpoint(path, module_tensors(detector, "model"), header, config.seed, {"role": role})


def load_detector(path) -> tuple[Detector, dict]:
    """Build a detector from any checkpoint (alignment and optimizer entries are ignored)."""
    tensors, header = load_checkpoint(path)
    det_cfg = DetectorConfig.from_dict(header["config"]["detector"])
    detector = Detector(det_cfg)
    load_module(detector, tensors, "model")
    return detector, header


def load_student(path, config: TrainConfig | None = None) -> StudentState:
    """Restore a student checkpoint; ``config`` overrides the stored training config."""
    tensors, header = load_checkpoint(path)
    stored = TrainConfig.from_dict(header["config"]["train"])
    config = config or stored
    det_cfg = DetectorConfig.from_dict(header["config"]["detector"])
    categories = header["config"].get("categories", [])
    detector = Detector(det_cfg)
    load_module(detector, tensors, "model")
    alignment = Alignment(det_cfg.d_model, config.n_prototypes, config.alignment_weights, config.lambda_grl)
    if any(k.startswith("align.") for k in tensors):
        load_module(alignment, tensors, "align")
    opt = _make_optimizer(detector, alignment, config.lr_burn_in, config.weight_decay)
    state = StudentState(detector, alignment, opt, config, categories,
                         int(header["meta"].get("next_epoch", 0)), header["meta"].get("stage", "burn_in"))
    if header["meta"].get("stage") == "burn_in" and config.to_dict() == stored.to_dict():
        load_optimizer(opt, tensors, state.param_names())
    return state


# ---------------------------------------------------------------------------
# steps


def _augment_batch(batch: ImageBatch, anns: list[AnnotationSet], rng: np.random.Generator):
    imgs, out = [], []
    for px, a in zip(batch.pixels.numpy(), anns):
        im, a2 = augment_weak(px, a, rng)
        imgs.append(im)
        out.append(a2)
    return ImageBatch(torch.from_numpy(np.stack(imgs)), batch.domain_tag, batch.image_ids), out


def _forward(state: StudentState, pixels: torch.Tensor, domain: Domain, adversarial: bool):
    enc_q, dec_q = state.alignment.queries() if adversarial else (None, None)
    out = state.detector(pixels, enc_q, dec_q)
    heads = state.alignment.head_losses(out, domain) if adversarial else {}
    return out, heads


def _optimizer_step(state: StudentState, loss: torch.Tensor) -> None:
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for g in state.optimizer.param_groups for p in g["params"] if p.grad is not None]
    if state.config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, state.config.grad_clip)
    state.optimizer.step()


class _EpochStats:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}
        self.teacher_precision: float | None = None
        self.student_precision: float | None = None

    def add(self, key: str, value) -> None:
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        self.sums[key] = self.sums.get(key, 0.0) + v
        self.counts[key] = self.counts.get(key, 0) + 1

    def mean(self, key: str, default=0.0):
        return self.sums[key] / self.counts[key] if self.counts.get(key) else default


def _supervised_epoch(state: StudentState, source: DetectionDataset, target: DetectionDataset | None,
                      epoch_key: int, stage: int, batch_size: int) -> _EpochStats:
    """One pass over labeled source batches; a target batch per step feeds the adversarial terms."""
    cfg = state.config
    weights = cfg.alignment_weights
    adversarial = weights.any and target is not None
    rng = np.random.default_rng([cfg.seed, _AUG, stage, epoch_key])
    tgt_iter = target.cycle(batch_size, cfg.seed, _TGT_ORDER * 100 + stage, epoch_key * 1000) if adversarial else None
    stats = _EpochStats()
    state.detector.train()
    for batch, anns in source.batches(batch_size, cfg.seed, epoch_key, True, _SRC_ORDER * 100 + stage):
        batch, anns = _augment_batch(batch, anns, rng)
        out_s, heads = _forward(state, batch.pixels, Domain.SOURCE, adversarial)
        det = detection_loss(out_s.decoder, anns)
        loss = det["total"]
        if adversarial:
            tbatch, tanns = next(tgt_iter)
            tbatch, _ = _augment_batch(tbatch, tanns, rng)
            _, heads_t = _forward(state, tbatch.pixels, Domain.TARGET, True)
            heads = {h: heads[h] + heads_t[h] for h in heads}
            adv = adv_loss(heads, weights)
            loss = loss - adv
            stats.add("adv", adv)
            for h, v in heads.items():
                stats.add(h, v)
        _optimizer_step(state, loss)
        stats.add("det_src", det["total"])
    return stats


def _lr(base: float, epoch: int, decay_epoch: int, factor: float) -> float:
    return base * (factor if epoch >= decay_epoch else 1.0)


def _finite_or_none(x):
    return None if x is None else float(x)


def burn_in(config: TrainConfig, source: DetectionDataset, target: DetectionDataset | None = None,
            val: DetectionDataset | None = None, state: StudentState | None = None,
            stop_epoch: int | None = None, report_path: str | Path | None = None,
            checkpoint_path: str | Path | None = None) -> tuple[StudentState, TrainReport]:
    """Supervised source training with (optional) adversarial alignment.

    Resumes from ``state.next_epoch`` when a state is given; ``stop_epoch``
    ends early (exclusive) so a run can be split across checkpoints.
    """
    if len(source) == 0 or (target is not None and len(target) == 0):
        raise ConfigurationError("burn-in needs non-empty datasets")
    if config.alignment_weights.any and target is None:
        raise ConfigurationError("adversarial alignment needs an unlabeled target dataset")
    state = state or init_student(config, source.n_classes, source.manifest.categories)
    state.config = config
    report = TrainReport()
    t0 = time.perf_counter()
    end = config.burn_in_epochs if stop_epoch is None else min(stop_epoch, config.burn_in_epochs)
    for epoch in range(state.next_epoch, end):
        te = time.perf_counter()
        lr = _lr(config.lr_burn_in, epoch, config.lr_decay_epoch, config.lr_decay_factor)
        state.set_lr(lr)
        stats = _supervised_epoch(state, source, target, epoch, _BURN_IN, config.batch_size_burn_in)
        state.next_epoch = epoch + 1
        heads = {h: stats.mean(h) for h in HEADS if h in stats.sums}
        rec = EpochRecord(
            "burn_in", epoch, "source", lr,
            det_loss_src=stats.mean("det_src"), head_losses=heads, adv_loss=stats.mean("adv"),
            objective=objective_report(stats.mean("det_src"), 0.0, stats.mean("adv")),
            val_map=evaluate_detector(state.detector, val).map if val is not None else None,
        )
        rec.seconds = time.perf_counter() - te
        report.append(rec, report_path)
        logger.info("burn-in epoch %d: det=%.4f adv=%.4f map=%s", epoch, rec.det_loss_src, rec.adv_loss, rec.val_map)
    report.wall_seconds = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_student(checkpoint_path, state)
    return state, report


def init_transfer(student: StudentState | str | Path, config: TrainConfig | None = None) -> tuple[MeanTeacherPair, StudentState]:
    """Teacher and student both start from the burn-in model."""
    if not isinstance(student, StudentState):
        student = load_student(student, config)
    cfg = config or student.config
    student.config = cfg
    student.stage = "transfer"
    student.next_epoch = 0
    student.optimizer = _make_optimizer(student.detector, student.alignment, cfg.lr_transfer, cfg.weight_decay)
    pair = MeanTeacherPair(student.detector, cfg.alpha, cfg.share_queries)
    return pair, student


def transfer_schedule(n_epochs: int) -> list[str]:
    return ["source" if e % 2 == 0 else "target" for e in range(n_epochs)]


def _target_epoch(state: StudentState, pair: MeanTeacherPair, source: DetectionDataset, target: DetectionDataset,
                  epoch: int) -> _EpochStats:
    cfg = state.config
    weights = cfg.alignment_weights
    adversarial = weights.any
    bs = cfg.batch_size_transfer
    rng = np.random.default_rng([cfg.seed, _AUG, _TRANSFER, epoch])
    src_iter = source.cycle(bs, cfg.seed, _SRC_ORDER * 100 + 50, epoch * 1000) if adversarial else None
    stats = _EpochStats()
    teacher_pl, student_pl, gts = [], [], []
    state.detector.train()
    for batch, gt in target.batches(bs, cfg.seed, epoch, True, _TGT_ORDER * 100 + _TRANSFER):
        weak, weak_gt = _augment_batch(batch, gt, rng)
        t_out = pair.teacher_predict(weak)
        pseudo = [generate_pseudo_labels(t_out.row(i), cfg.tau, img) for i, img in enumerate(weak.image_ids)]
        strong = torch.from_numpy(np.stack([strong_photometric(px, rng) for px in weak.pixels.numpy()]))
        out_t, heads = _forward(state, strong, Domain.TARGET, adversarial)
        # a batch without a single pseudo label contributes only its adversarial terms
        has_labels = any(len(p) for p in pseudo)
        det_tgt = detection_loss(out_t.decoder, pseudo)["total"] if has_labels else None
        loss = det_tgt if has_labels else 0.0
        if adversarial:
            sbatch, sanns = next(src_iter)
            sbatch, _ = _augment_batch(sbatch, sanns, rng)
            _, heads_s = _forward(state, sbatch.pixels, Domain.SOURCE, True)
            heads = {h: heads[h] + heads_s[h] for h in heads}
            adv = adv_loss(heads, weights)
            loss = loss - adv
            stats.add("adv", adv)
            for h, v in heads.items():
                stats.add(h, v)
        # the student's own at-threshold predictions on the very view the teacher labeled
        with torch.no_grad():
            s_out = state.detector(weak.pixels).decoder
        student_pl += [generate_pseudo_labels(s_out.row(i), cfg.tau, img) for i, img in enumerate(weak.image_ids)]
        if has_labels or adversarial:
            _optimizer_step(state, loss)
        stats.add("det_tgt", det_tgt if has_labels else 0.0)
        for p in pseudo:
            stats.sums["n_pseudo"] = stats.sums.get("n_pseudo", 0) + len(p)
            for s in p.scores:
                stats.add("pseudo_score", s)
        teacher_pl += pseudo
        gts += weak_gt
    tp, _, _ = pseudo_label_quality(teacher_pl, gts)
    sp, _, _ = pseudo_label_quality(student_pl, gts)
    stats.teacher_precision, stats.student_precision = tp, sp
    return stats


def transfer_train(pair: MeanTeacherPair, state: StudentState, source: DetectionDataset, target: DetectionDataset,
                   val: DetectionDataset | None = None, report_path: str | Path | None = None,
                   on_epoch_end=None) -> TrainReport:
    """Alternate source/target epochs (starting with source); EMA after each source epoch."""
    cfg = state.config
    if len(source) == 0 or len(target) == 0:
        raise ConfigurationError("transfer needs non-empty source and target datasets")
    report = TrainReport()
    t0 = time.perf_counter()
    for epoch, domain in enumerate(transfer_schedule(cfg.transfer_epochs)):
        te = time.perf_counter()
        lr = _lr(cfg.lr_transfer, epoch, cfg.lr_decay_epoch_transfer, cfg.lr_decay_factor)
        state.set_lr(lr)
        rec = EpochRecord("transfer", epoch, domain, lr)
        if domain == "source":
            stats = _supervised_epoch(state, source, target, epoch, _TRANSFER, cfg.batch_size_transfer)
            pair.ema_update()
            rec.det_loss_src = stats.mean("det_src")
        else:
            stats = _target_epoch(state, pair, source, target, epoch)
            rec.det_loss_tgt = stats.mean("det_tgt")
            rec.n_pseudo = int(stats.sums.get("n_pseudo", 0))
            rec.mean_pseudo_score = stats.mean("pseudo_score", None)
            rec.teacher_precision = stats.teacher_precision
            rec.student_precision = stats.student_precision
            if rec.n_pseudo == 0:
                rec.warning = "teacher produced no pseudo labels this epoch; trained on adversarial terms only"
                logger.warning("transfer epoch %d: %s", epoch, rec.warning)
        state.next_epoch = epoch + 1
        rec.head_losses = {h: stats.mean(h) for h in HEADS if h in stats.sums}
        rec.adv_loss = stats.mean("adv")
        rec.objective = objective_report(rec.det_loss_src, rec.det_loss_tgt, rec.adv_loss)
        rec.ema_updates = pair.n_updates
        rec.queries_bit_equal = bool(torch.equal(pair.teacher.query_embed, pair.student.query_embed))
        if val is not None:
            rec.val_map = evaluate_detector(pair.student, val).map
            rec.teacher_val_map = evaluate_detector(pair.teacher, val).map
        rec.seconds = time.perf_counter() - te
        report.append(rec, report_path)
        logger.info("transfer epoch %d (%s): det_src=%.4f det_tgt=%.4f pseudo=%d map=%s/%s", epoch, domain,
                    rec.det_loss_src, rec.det_loss_tgt, rec.n_pseudo, rec.val_map, rec.teacher_val_map)
        if on_epoch_end is not None:
            on_epoch_end(epoch, pair, state, rec)
    report.wall_seconds = time.perf_counter() - t0
    return report
