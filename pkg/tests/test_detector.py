import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mttrans.data import AnnotationSet
from mttrans.detector import (
    DecoderOutput, Detector, DetectorConfig, LossWeights, assign, detection_loss, detokenize, hungarian_match,
    match_cost, tokenize,
)
from mttrans.errors import CapacityError, ConfigurationError

from oracles import brute_force_assignment_cost


@pytest.fixture(scope="module")
def small_detector():
    torch.manual_seed(0)
    return Detector(DetectorConfig(d_model=32, n_heads=4, n_enc=1, n_dec=2, n_queries=6, n_classes=5)).eval()


def test_feature_maps_at_three_strides(small_detector):
    maps = small_detector.extract_features(torch.rand(2, 3, 64, 64))
    assert [tuple(m.shape) for m in maps] == [(2, 32, 8, 8), (2, 32, 4, 4), (2, 32, 2, 2)]


def test_non_multiple_of_32_is_rejected(small_detector):
    with pytest.raises(ConfigurationError):
        small_detector.extract_features(torch.rand(1, 3, 48, 64))


def test_tokenize_counts_and_round_trip(small_detector):
    maps = small_detector.extract_features(torch.rand(2, 3, 64, 64))
    ms = tokenize(maps)
    assert ms.n_tokens == 84
    assert ms.level_index.tolist() == [0] * 64 + [1] * 16 + [2] * 4
    assert ms.spatial_shapes == [(8, 8), (4, 4), (2, 2)]
    assert ms.position_encoding.shape == ms.tokens.shape
    for a, b in zip(detokenize(ms), maps):
        assert torch.equal(a, b)


def test_encode_arity_with_and_without_domain_query(small_detector):
    ms = small_detector.tokenize(small_detector.extract_features(torch.rand(2, 3, 64, 64)))
    out, g = small_detector.encode(ms)
    assert out.tokens.shape == (2, 84, 32) and g is None
    out, g = small_detector.encode(ms, torch.randn(32))
    assert out.tokens.shape == (2, 84, 32) and g.shape == (2, 32)


def test_encode_width_mismatch(small_detector):
    ms = small_detector.tokenize(small_detector.extract_features(torch.rand(1, 3, 64, 64)))
    with pytest.raises(ConfigurationError):
        small_detector.encode(ms.replace(torch.zeros(1, 84, 16)))


def test_encoder_is_permutation_equivariant(small_detector):
    ms = small_detector.tokenize(small_detector.extract_features(torch.rand(1, 3, 64, 64)))
    perm = torch.arange(84)
    perm[[3, 40]] = perm[[40, 3]]  # two tokens of level 0
    permuted = type(ms)(ms.tokens[:, perm], ms.level_index, ms.spatial_shapes, ms.position_encoding[:, perm])
    with torch.no_grad():
        a, _ = small_detector.encode(ms)
        b, _ = small_detector.encode(permuted)
    assert torch.allclose(a.tokens[:, perm], b.tokens, atol=1e-5)


def test_decoder_shapes_and_box_range(small_detector):
    with torch.no_grad():
        out = small_detector(torch.rand(3, 3, 64, 64))
    d = out.decoder
    assert d.features.shape == (3, 6, 32)
    assert d.class_logits.shape == (3, 6, 6)
    assert d.box_preds.shape == (3, 6, 4)
    assert bool(((d.box_preds > 0) & (d.box_preds < 1)).all())
    assert bool(torch.isfinite(d.class_logits).all())


def test_decoder_domain_query_is_separate(small_detector):
    with torch.no_grad():
        out = small_detector(torch.rand(2, 3, 64, 64), torch.randn(32), torch.randn(32))
    assert out.decoder.features.shape == (2, 6, 32)
    assert out.enc_global.shape == (2, 32) and out.dec_global.shape == (2, 32)


def test_batch_independence_and_determinism(small_detector):
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        out = small_detector(torch.cat([x, x])).decoder
        again = small_detector(torch.cat([x, x])).decoder
    assert torch.allclose(out.class_logits[0], out.class_logits[1], atol=1e-6)
    assert torch.allclose(out.box_preds[0], out.box_preds[1], atol=1e-6)
    assert torch.equal(out.box_preds, again.box_preds)


# --- matching -------------------------------------------------------------


def _row(logits, boxes):
    logits = torch.as_tensor(logits, dtype=torch.float64)
    boxes = torch.as_tensor(boxes, dtype=torch.float64)
    return DecoderOutput(torch.zeros(1, logits.shape[0], 4, dtype=torch.float64), logits[None], boxes[None])


def test_single_query_single_target():
    m = hungarian_match(_row([[0.0, 0.0, 0.0]], [[0.5, 0.5, 0.2, 0.2]]), AnnotationSet([[0.4, 0.4, 0.1, 0.1]], [1], 0))
    assert m.pairs == [(0, 0)]


def test_hand_cost_matrix():
    m = assign(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert set(m.pairs) == {(0, 0), (1, 1)}


def test_more_targets_than_queries_is_capacity_error():
    with pytest.raises(CapacityError):
        hungarian_match(_row([[0.0, 0.0, 0.0]], [[0.5, 0.5, 0.2, 0.2]]),
                        AnnotationSet([[0.4, 0.4, 0.1, 0.1], [0.6, 0.6, 0.1, 0.1]], [0, 1], 0))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 2**31 - 1))
def test_matcher_reaches_the_brute_force_optimum(q, n, seed):
    n = min(n, q)
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(q, 4))
    boxes = np.column_stack([rng.uniform(0.2, 0.8, (q, 2)), rng.uniform(0.05, 0.3, (q, 2))])
    tb = np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.05, 0.3, (n, 2))])
    tc = rng.integers(0, 3, n)
    row = _row(logits, boxes)
    m = hungarian_match(row, AnnotationSet(tb, tc, 0))
    if n == 0:
        assert m.pairs == []
        return
    cost = match_cost(row.class_logits[0], row.box_preds[0], torch.tensor(tb), torch.tensor(tc)).numpy()
    got = sum(cost[i, j] for i, j in m.pairs)
    assert len({i for i, _ in m.pairs}) == n
    assert got == pytest.approx(brute_force_assignment_cost(cost), abs=1e-12)


# --- loss -----------------------------------------------------------------


def test_perfect_prediction_has_zero_box_terms():
    targets = AnnotationSet([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3]], [0, 2], 0)
    logits = torch.full((1, 3, 4), -20.0, dtype=torch.float64)
    logits[0, 0, 0] = logits[0, 1, 2] = logits[0, 2, 3] = 20.0
    boxes = torch.tensor([[[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3], [0.5, 0.5, 0.1, 0.1]]], dtype=torch.float64)
    loss = detection_loss(DecoderOutput(torch.zeros(1, 3, 4), logits, boxes), [targets])
    assert float(loss["l1"]) == 0.0
    assert float(loss["giou"]) == pytest.approx(0.0, abs=1e-15)
    assert float(loss["cls"]) < 1e-15


def test_zero_targets_uniform_logits():
    q, k1 = 5, 6
    logits = torch.zeros(1, q, k1, dtype=torch.float64)
    boxes = torch.full((1, q, 4), 0.5, dtype=torch.float64)
    loss = detection_loss(DecoderOutput(torch.zeros(1, q, 4), logits, boxes), [AnnotationSet(np.zeros((0, 4)), [], 0)])
    assert float(loss["cls"]) == pytest.approx(q * 0.1 * math.log(6), rel=1e-12)
    assert float(loss["l1"]) == 0.0 and float(loss["giou"]) == 0.0
    assert float(loss["total"]) == pytest.approx(2 * q * 0.1 * math.log(6), rel=1e-12)


def test_total_is_weighted_sum(rng):
    logits = torch.tensor(rng.normal(size=(2, 4, 6)))
    boxes = torch.tensor(rng.uniform(0.2, 0.6, size=(2, 4, 4)))
    targets = [AnnotationSet([[0.4, 0.4, 0.2, 0.2]], [1], 0), AnnotationSet([[0.5, 0.5, 0.3, 0.1], [0.2, 0.2, 0.1, 0.1]], [0, 4], 1)]
    loss = detection_loss(DecoderOutput(torch.zeros(2, 4, 4), logits, boxes), targets)
    w = LossWeights()
    assert float(loss["total"]) == pytest.approx(float(w.cls * loss["cls"] + w.l1 * loss["l1"] + w.giou * loss["giou"]))


def test_loss_invariant_to_target_order(rng):
    logits = torch.tensor(rng.normal(size=(1, 5, 6)))
    boxes = torch.tensor(rng.uniform(0.2, 0.6, size=(1, 5, 4)))
    b = np.column_stack([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.05, 0.3, (3, 2))])
    c = np.array([0, 3, 1])
    pred = DecoderOutput(torch.zeros(1, 5, 4), logits, boxes)
    a = detection_loss(pred, [AnnotationSet(b, c, 0)])
    p = [2, 0, 1]
    z = detection_loss(pred, [AnnotationSet(b[p], c[p], 0)])
    for k in a:
        assert float(a[k]) == float(z[k])


def test_loss_is_finite_on_detector_output(small_detector):
    out = small_detector(torch.rand(2, 3, 64, 64)).decoder
    t = [AnnotationSet([[0.5, 0.5, 0.3, 0.3]], [2], 0), AnnotationSet(np.zeros((0, 4)), [], 1)]
    loss = detection_loss(out, t)
    assert all(bool(torch.isfinite(v)) for v in loss.values())
