"""Teacher-student pair with EMA weights, shared object queries, and pseudo labels."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import AnnotationSet, Domain, ImageBatch, MIN_BOX_SIDE
from .detector import DecoderOutput
from .errors import ConfigurationError, StateError, UsageError

QUERY_PARAM = "query_embed"


@dataclass
class PseudoLabelSet(AnnotationSet):
    threshold_used: float = 0.5


class MeanTeacherPair:
    """Student trained by backprop; teacher tracks it by exponential moving average.

    With ``share_queries`` the teacher holds the very same object-query
    Parameter as the student, so the two can never drift apart.
    """

    def __init__(self, student: nn.Module, alpha: float = 0.999, share_queries: bool = True,
                 teacher: nn.Module | None = None):
        if not 0.0 <= alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in [0, 1], got {alpha}")
        self.student = student
        self.alpha = float(alpha)
        self.share_queries = share_queries and hasattr(student, QUERY_PARAM)
        self.teacher = teacher if teacher is not None else copy.deepcopy(student)
        if self.share_queries:
            self.teacher.query_embed = student.query_embed
        for name, p in self.teacher.named_parameters():
            if not (self.share_queries and name == QUERY_PARAM):
                p.requires_grad_(False)
        self.teacher.eval()
        self.n_updates = 0
        self._check_shapes()

    def _check_shapes(self):
        s = dict(self.student.named_parameters(remove_duplicate=False))
        t = dict(self.teacher.named_parameters(remove_duplicate=False))
        if s.keys() != t.keys():
            raise StateError(f"parameter names differ: {sorted(s.keys() ^ t.keys())}")
        for name in s:
            if s[name].shape != t[name].shape:
                raise StateError(f"{name}: student {tuple(s[name].shape)} vs teacher {tuple(t[name].shape)}")

    def queries_shared(self) -> bool:
        return self.teacher.query_embed is self.student.query_embed

    @torch.no_grad()
    def ema_update(self) -> None:
        """teacher <- alpha * teacher + (1 - alpha) * student for every non-shared parameter."""
        self._check_shapes()
        s = dict(self.student.named_parameters(remove_duplicate=False))
        a = self.alpha
        for name, pt in self.teacher.named_parameters(remove_duplicate=False):
            ps = s[name]
            if pt is ps:
                continue
            pt.mul_(a).add_(ps, alpha=1.0 - a)
        self.n_updates += 1

    @torch.no_grad()
    def teacher_predict(self, weak_images: ImageBatch) -> DecoderOutput:
        if weak_images.domain_tag is not Domain.TARGET:
            raise UsageError("the teacher only labels target-domain batches")
        self.teacher.eval()
        return self.teacher(weak_images.pixels).decoder


def ema_update(pair: MeanTeacherPair) -> MeanTeacherPair:
    pair.ema_update()
    return pair


def teacher_predict(pair: MeanTeacherPair, weak_images: ImageBatch) -> DecoderOutput:
    return pair.teacher_predict(weak_images)


def generate_pseudo_labels(teacher_output: DecoderOutput, tau: float = 0.5, image_id: int = -1) -> PseudoLabelSet:
    """Keep queries whose best foreground probability reaches ``tau``.

    Kept boxes are clipped to the image; boxes that clip to nothing are dropped.
    """
    if not 0.0 < tau < 1.0:
        raise ConfigurationError(f"tau must be in (0, 1), got {tau}")
    logits = teacher_output.class_logits.detach().reshape(-1, teacher_output.class_logits.shape[-1])
    boxes = teacher_output.box_preds.detach().reshape(-1, 4).double().cpu().numpy()
    prob = logits.double().softmax(-1)[:, :-1].cpu().numpy()
    scores = prob.max(1)
    classes = prob.argmax(1)
    keep = scores >= tau
    b = boxes[keep]
    xyxy = np.clip(np.concatenate([b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2], 1), 0.0, 1.0)
    wh = xyxy[:, 2:] - xyxy[:, :2]
    ok = (wh > MIN_BOX_SIDE).all(1)
    xyxy, wh = xyxy[ok], wh[ok]
    out_boxes = np.concatenate([(xyxy[:, :2] + xyxy[:, 2:]) / 2, wh], 1)
    return PseudoLabelSet(out_boxes, classes[keep][ok], image_id, scores[keep][ok], threshold_used=float(tau))
