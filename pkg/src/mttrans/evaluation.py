"""Detection metrics: IoU, all-point interpolated AP, mAP@0.5, pseudo-label quality."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .boxes import iou as _iou
from .data import AnnotationSet
from .errors import DomainError, MTTransError


class EvaluationError(MTTransError, ValueError):
    pass


@dataclass(frozen=True)
class DetectionRecord:
    image_id: int
    class_id: int
    score: float
    box: tuple[float, float, float, float]


@dataclass
class EvalResult:
    ap: dict[int, float]
    gt_counts: dict[int, int]
    det_counts: dict[int, int]
    iou_thresh: float = 0.5
    class_names: list[str] = field(default_factory=list)

    @property
    def map(self) -> float:
        return float(np.mean(list(self.ap.values())))

    def to_text(self, per_class: bool = False) -> str:
        lines = [f"iou_thresh={self.iou_thresh:g}", f"mAP={self.map:.4f}"]
        lines.append(f"n_gt={sum(self.gt_counts.values())}")
        lines.append(f"n_det={sum(self.det_counts.values())}")
        if per_class:
            for c in sorted(self.gt_counts):
                name = self.class_names[c] if c < len(self.class_names) else str(c)
                ap = self.ap.get(c)
                ap_s = "n/a" if ap is None else f"{ap:.4f}"
                lines.append(f"AP[{name}]={ap_s} gt={self.gt_counts[c]} det={self.det_counts.get(c, 0)}")
        return "\n".join(lines)


def iou(box_a, box_b) -> float:
    """IoU of two cxcywh boxes."""
    a, b = np.asarray(box_a, float), np.asarray(box_b, float)
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise DomainError("boxes must have positive width and height")
    return _iou(a, b)


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, float).reshape(-1, 4)
    b = np.asarray(b, float).reshape(-1, 4)
    ax0, ay0, ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2, a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0, bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax1[:, None], bx1[None]) - np.maximum(ax0[:, None], bx0[None]), 0, None)
    ih = np.clip(np.minimum(ay1[:, None], by1[None]) - np.maximum(ay0[:, None], by0[None]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    # rounding can push identical boxes a few ulps past one
    return np.minimum(inter / union, 1.0)


def match_detections(detections: Sequence[DetectionRecord], ground_truth: Sequence[AnnotationSet], class_id: int, iou_thresh: float):
    """Greedy score-ordered matching for one class.

    Returns (tp flags in score order, scores in score order, number of GT).
    Equal scores keep their input order.
    """
    gt = {}
    n_gt = 0
    for a in ground_truth:
        sel = a.class_ids == class_id
        gt[a.image_id] = a.boxes[sel]
        n_gt += int(sel.sum())
    dets = [d for d in detections if d.class_id == class_id]
    order = np.argsort(-np.array([d.score for d in dets], dtype=float), kind="stable")
    used = {k: np.zeros(len(v), bool) for k, v in gt.items()}
    tp = np.zeros(len(dets), bool)
    for rank, j in enumerate(order):
        d = dets[j]
        boxes = gt.get(d.image_id)
        if boxes is None or not len(boxes):
            continue
        ious = _iou_matrix(np.asarray(d.box)[None], boxes)[0]
        ious[used[d.image_id]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            used[d.image_id][best] = True
            tp[rank] = True
    return tp, np.array([dets[j].score for j in order], float), n_gt


def ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    """Area under the enveloped precision-recall curve (all-point interpolation)."""
    if n_gt == 0:
        raise EvaluationError("AP is undefined for a class with no ground truth")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1][:-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre))


def average_precision(detections, ground_truth, class_id: int, iou_thresh: float = 0.5) -> float:
    tp, _, n_gt = match_detections(detections, ground_truth, class_id, iou_thresh)
    return ap_from_tp(tp, n_gt)


def map50(detections, ground_truth, iou_thresh: float = 0.5, class_names: Sequence[str] = ()) -> EvalResult:
    """mAP over classes that have at least one ground-truth instance."""
    gt_counts: dict[int, int] = {}
    for a in ground_truth:
        for c in a.class_ids.tolist():
            gt_counts[c] = gt_counts.get(c, 0) + 1
    if not gt_counts:
        raise EvaluationError("no ground-truth boxes to evaluate against")
    for c in range(len(class_names)):
        gt_counts.setdefault(c, 0)
    det_counts: dict[int, int] = {}
    for d in detections:
        det_counts[d.class_id] = det_counts.get(d.class_id, 0) + 1
    ap = {c: average_precision(detections, ground_truth, c, iou_thresh) for c, n in sorted(gt_counts.items()) if n > 0}
    return EvalResult(ap, dict(sorted(gt_counts.items())), det_counts, iou_thresh, list(class_names))


def pseudo_label_quality(pseudo: Sequence[AnnotationSet], ground_truth: Sequence[AnnotationSet], iou_thresh: float = 0.5):
    """(precision or None, recall, mean IoU of matched pairs or None), class-aware greedy matching."""
    gt = {a.image_id: a for a in ground_truth}
    n_gt = sum(len(a) for a in ground_truth)
    n_pseudo = matched = 0
    matched_ious = []
    for p in pseudo:
        n_pseudo += len(p)
        g = gt.get(p.image_id)
        if g is None or not len(g) or not len(p):
            continue
        scores = p.scores if p.scores is not None else np.ones(len(p))
        used = np.zeros(len(g), bool)
        ious = _iou_matrix(p.boxes, g.boxes)
        for j in np.argsort(-scores, kind="stable"):
            cand = np.where((g.class_ids == p.class_ids[j]) & ~used, ious[j], -1.0)
            best = int(np.argmax(cand))
            if cand[best] >= iou_thresh:
                used[best] = True
                matched += 1
                matched_ious.append(cand[best])
    precision = matched / n_pseudo if n_pseudo else None
    recall = matched / n_gt if n_gt else 0.0
    mean_iou = float(np.mean(matched_ious)) if matched_ious else None
    return precision, recall, mean_iou


def decoder_to_records(class_logits: torch.Tensor, box_preds: torch.Tensor, image_ids: Sequence[int]) -> list[DetectionRecord]:
    """One detection per query: its most probable foreground class and that probability."""
    prob = class_logits.detach().float().softmax(-1)[..., :-1]
    scores, classes = prob.max(-1)
    out = []
    boxes = box_preds.detach().double().cpu().numpy()
    for i, img in enumerate(image_ids):
        for q in range(prob.shape[1]):
            out.append(DetectionRecord(int(img), int(classes[i, q]), float(scores[i, q]), tuple(boxes[i, q].tolist())))
    return out


@torch.no_grad()
def predict(detector, dataset, batch_size: int = 50) -> list[DetectionRecord]:
    was_training = detector.training
    detector.eval()
    records = []
    try:
        for batch, _ in dataset.batches(batch_size, shuffle=False):
            out = detector(batch.pixels).decoder
            records += decoder_to_records(out.class_logits, out.box_preds, batch.image_ids)
    finally:
        detector.train(was_training)
    return records


def evaluate_detector(detector, dataset, iou_thresh: float = 0.5, batch_size: int = 50) -> EvalResult:
    """mAP of a detector over a loaded split."""
    return map50(predict(detector, dataset, batch_size), dataset.annotations, iou_thresh, dataset.manifest.categories)
