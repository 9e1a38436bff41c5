import numpy as np
import torch
from PIL import Image

from mttrans.data import AnnotationSet
from mttrans.detector import DecoderOutput, Detector, DetectorConfig
from mttrans.visualize import (
    GT_COLOR, render_panel, select_images, threshold_detections, write_overlays,
)


def test_selection_is_seeded_sorted_and_bounded():
    a = select_images(50, 5, seed=3)
    assert a == select_images(50, 5, seed=3) and a == sorted(a) and len(set(a)) == 5
    assert a != select_images(50, 5, seed=4)
    assert select_images(3, 10, seed=0) == [0, 1, 2]


def test_threshold_zero_keeps_every_query():
    logits = torch.tensor([[[5.0, 0.0, 9.0], [0.0, 3.0, 0.0]]])
    row = DecoderOutput(torch.zeros(1, 2, 4), logits, torch.full((1, 2, 4), 0.4))
    assert len(threshold_detections(row, 0.0, 0)) == 2
    assert len(threshold_detections(row, 0.5, 0)) == 1


def test_panel_draws_box_outline():
    img = render_panel(np.zeros((3, 64, 64)), AnnotationSet([(0.5, 0.5, 0.5, 0.5)], [0], 0), GT_COLOR, ["sq"], "gt",
                       scale=2, with_score=False)
    assert img.size == (128, 128)
    px = np.asarray(img)
    assert tuple(px[64, 32]) == GT_COLOR  # left edge of the box at x = 0.25 * 128


def test_write_overlays(tiny_data, tmp_path):
    torch.manual_seed(0)
    det = Detector(DetectorConfig(d_model=32, n_heads=4, n_enc=1, n_dec=1, n_queries=6, n_classes=5))
    recs = write_overlays(det, det, tiny_data[2], tmp_path, n_images=3, tau=0.5, seed=1, scale=2)
    assert len(recs) == 3
    for r in recs:
        im = Image.open(tmp_path / r.file)
        assert im.size == (3 * 128 + 2 * 4, 128)
        assert r.n_student == r.n_pseudo  # same network on both sides
    assert (tmp_path / "overlays.json").is_file()
