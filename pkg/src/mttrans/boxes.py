"""Box geometry in normalized (cx, cy, w, h) coordinates."""

from __future__ import annotations

import torch

from .errors import DomainError


class DegenerateBoxError(DomainError):
    """A box with non-positive width or height."""


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def _check(boxes: torch.Tensor) -> None:
    if boxes.numel() and not bool((boxes[..., 2:] > 0).all()):
        raise DegenerateBoxError("boxes must have positive width and height")


def _inter_union(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    return inter, area_a + area_b - inter


def pairwise_giou(boxes_a: torch.Tensor, boxes_b: torch.Tensor) -> torch.Tensor:
    """GIoU matrix between (N, 4) and (M, 4) cxcywh boxes -> (N, M)."""
    _check(boxes_a)
    _check(boxes_b)
    a = cxcywh_to_xyxy(boxes_a)[:, None, :]
    b = cxcywh_to_xyxy(boxes_b)[None, :, :]
    inter, union = _inter_union(a, b)
    iou = inter / union
    lt = torch.minimum(a[..., :2], b[..., :2])
    rb = torch.maximum(a[..., 2:], b[..., 2:])
    enclosing = (rb - lt).prod(-1)
    return iou - (enclosing - union) / enclosing


def pairwise_iou(boxes_a: torch.Tensor, boxes_b: torch.Tensor) -> torch.Tensor:
    _check(boxes_a)
    _check(boxes_b)
    inter, union = _inter_union(cxcywh_to_xyxy(boxes_a)[:, None, :], cxcywh_to_xyxy(boxes_b)[None, :, :])
    return inter / union


def giou(box_a, box_b) -> float:
    """Generalized IoU of two cxcywh boxes; lies in [-1, 1]."""
    a = torch.as_tensor(box_a, dtype=torch.float64).reshape(1, 4)
    b = torch.as_tensor(box_b, dtype=torch.float64).reshape(1, 4)
    return float(pairwise_giou(a, b)[0, 0])


def iou(box_a, box_b) -> float:
    a = torch.as_tensor(box_a, dtype=torch.float64).reshape(1, 4)
    b = torch.as_tensor(box_b, dtype=torch.float64).reshape(1, 4)
    return float(pairwise_iou(a, b)[0, 0])
