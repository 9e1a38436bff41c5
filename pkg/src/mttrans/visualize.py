"""Overlay panels: ground truth | student detections | teacher pseudo labels."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .data import AnnotationSet, DetectionDataset
from .mean_teacher import generate_pseudo_labels

GT_COLOR = (40, 220, 40)
STUDENT_COLOR = (40, 120, 255)
TEACHER_COLOR = (255, 60, 40)
PANEL_TITLES = ("ground truth", "student", "teacher pseudo labels")


@dataclass
class OverlayRecord:
    image_id: int
    file: str
    n_gt: int
    n_student: int
    n_pseudo: int


def select_images(n_total: int, n_images: int, seed: int) -> list[int]:
    """Seeded choice of dataset indices, returned in ascending order."""
    n = min(n_images, n_total)
    return sorted(np.random.default_rng(seed).choice(n_total, size=n, replace=False).tolist())


def threshold_detections(row, tau: float, image_id: int) -> AnnotationSet:
    """Detections at threshold ``tau``; tau = 0 keeps every query."""
    # every softmax probability is positive, so the smallest positive threshold keeps all queries
    return generate_pseudo_labels(row, tau if tau > 0 else float(np.nextafter(0.0, 1.0)), image_id)


def _draw_boxes(draw: ImageDraw.ImageDraw, ann: AnnotationSet, size: int, color, categories, with_score: bool):
    for k, (box, cls) in enumerate(zip(ann.boxes, ann.class_ids)):
        cx, cy, w, h = (float(v) * size for v in box)
        x0, y0, x1, y1 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
        draw.rectangle([x0, y0, x1, y1], outline=color, width=2)
        label = categories[cls] if cls < len(categories) else str(cls)
        if with_score and ann.scores is not None:
            label = f"{label} {float(ann.scores[k]):.2f}"
        draw.text((x0 + 2, max(y0 - 11, 0)), label, fill=color)


def render_panel(pixels: np.ndarray, ann: AnnotationSet, color, categories, title: str, scale: int,
                 with_score: bool) -> Image.Image:
    img = Image.fromarray((np.clip(pixels, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0))
    size = img.width * scale
    img = img.resize((size, img.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    _draw_boxes(draw, ann, size, color, categories, with_score)
    draw.text((3, img.height - 12), title, fill=(255, 255, 255))
    return img


@torch.no_grad()
def write_overlays(student, teacher, dataset: DetectionDataset, out: str | Path, n_images: int = 4,
                   tau: float = 0.5, seed: int = 0, scale: int = 4) -> list[OverlayRecord]:
    """One composite PNG per selected image plus an ``overlays.json`` index with box counts."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    categories = dataset.manifest.categories
    student.eval()
    teacher.eval()
    records = []
    for idx in select_images(len(dataset), n_images, seed):
        batch, (gt,) = dataset.batch([idx])
        img_id = batch.image_ids[0]
        s_det = threshold_detections(student(batch.pixels).decoder.row(0), tau, img_id)
        t_det = threshold_detections(teacher(batch.pixels).decoder.row(0), tau, img_id)
        px = batch.pixels[0].numpy()
        panels = [
            render_panel(px, gt, GT_COLOR, categories, PANEL_TITLES[0], scale, False),
            render_panel(px, s_det, STUDENT_COLOR, categories, PANEL_TITLES[1], scale, True),
            render_panel(px, t_det, TEACHER_COLOR, categories, f"{PANEL_TITLES[2]} (tau={tau:g})", scale, True),
        ]
        gap = 4
        canvas = Image.new("RGB", (sum(p.width for p in panels) + gap * (len(panels) - 1), panels[0].height), (0, 0, 0))
        x = 0
        for p in panels:
            canvas.paste(p, (x, 0))
            x += p.width + gap
        name = f"overlay_{img_id:05d}.png"
        canvas.save(out / name)
        records.append(OverlayRecord(img_id, name, len(gt), len(s_det), len(t_det)))
    (out / "overlays.json").write_text(json.dumps({"tau": tau, "seed": seed, "images": [r.__dict__ for r in records]}, indent=1))
    return records
