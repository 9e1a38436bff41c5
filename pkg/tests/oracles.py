"""Slow, obviously-correct reference implementations used as test oracles."""

import itertools

import numpy as np


def brute_force_assignment_cost(cost: np.ndarray) -> float:
    """Minimum total cost over every injective row choice for each column (rows >= cols)."""
    n_rows, n_cols = cost.shape
    best = np.inf
    for rows in itertools.permutations(range(n_rows), n_cols):
        best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    return best


def raster_overlap(a, b, resolution: int = 1000):
    """(IoU, GIoU) of two cxcywh boxes by counting pixel centers on a resolution^2 grid of the unit square."""
    centers = (np.arange(resolution) + 0.5) / resolution
    xx, yy = np.meshgrid(centers, centers, indexing="xy")

    def mask(box):
        cx, cy, w, h = box
        return (xx >= cx - w / 2) & (xx < cx + w / 2) & (yy >= cy - h / 2) & (yy < cy + h / 2)

    ma, mb = mask(a), mask(b)
    inter = np.count_nonzero(ma & mb)
    union = np.count_nonzero(ma | mb)
    either = ma | mb
    cols = np.flatnonzero(either.any(0))
    rows = np.flatnonzero(either.any(1))
    hull = (cols[-1] - cols[0] + 1) * (rows[-1] - rows[0] + 1)
    iou = inter / union
    return iou, iou - (hull - union) / hull


def _iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def brute_force_ap(detections, gts, class_id: int, iou_thresh: float = 0.5) -> float:
    """AP by scanning every operating point.

    detections: list of (image_id, class_id, score, box); gts: dict image_id -> list of (class_id, box).
    Matching: in descending score order (ties by input order) each detection takes the
    unmatched same-class GT with the highest IoU when that IoU reaches the threshold.
    AP: for each recall level reached, the best precision at that recall or beyond,
    weighted by the recall increment.
    """
    dets = [d for d in detections if d[1] == class_id]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    n_gt = sum(1 for v in gts.values() for c, _ in v if c == class_id)
    used = set()
    flags = []
    for i in order:
        img, _, _, box = dets[i]
        best, best_j = -1.0, None
        for j, (c, g) in enumerate(gts.get(img, [])):
            if c != class_id or (img, j) in used:
                continue
            v = _iou(box, g)
            if v > best:
                best, best_j = v, j
        if best_j is not None and best >= iou_thresh:
            used.add((img, best_j))
            flags.append(True)
        else:
            flags.append(False)
    points = []  # (recall, precision) at each cut-off k
    tp = 0
    for k, f in enumerate(flags, 1):
        tp += f
        points.append((tp / n_gt, tp / k))
    ap, prev_recall = 0.0, 0.0
    for r in sorted({p[0] for p in points}):
        if r <= prev_recall:
            continue
        best_precision = max(p for rr, p in points if rr >= r)
        ap += (r - prev_recall) * best_precision
        prev_recall = r
    return ap


def random_ap_instance(rng, n_det=20, n_img=3, n_cls=2):
    """Random (detections, gts) in brute_force_ap's format: mostly jittered GT copies, coarse tied scores."""
    gts = {}
    for img in range(n_img):
        k = rng.integers(0, 4)
        gts[img] = [(int(rng.integers(0, n_cls)),
                     (rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3)))
                    for _ in range(k)]
    dets = []
    for _ in range(n_det):
        img = int(rng.integers(0, n_img))
        if gts[img] and rng.random() < 0.7:
            c, b = gts[img][rng.integers(0, len(gts[img]))]
            b = tuple(np.asarray(b) + rng.normal(0, 0.03, 4) * [1, 1, 0.5, 0.5])
        else:
            c = int(rng.integers(0, n_cls))
            b = (rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3))
        # coarse scores so that ties occur
        dets.append((img, int(c), float(rng.integers(1, 8)) / 8, b))
    return dets, gts


def dense_gcn(adj: np.ndarray, h: np.ndarray, weights, relu_first: bool = True) -> np.ndarray:
    """Two Kipf layers with explicit degree matrices: relu(Â H W1), then Â H W2."""
    deg = adj.sum(1)
    d_inv_sqrt = np.diag(1.0 / np.sqrt(deg))
    a_hat = d_inv_sqrt @ adj @ d_inv_sqrt
    h1 = a_hat @ h @ weights[0]
    if relu_first:
        h1 = np.maximum(h1, 0.0)
    return a_hat @ h1 @ weights[1]


def central_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Gradient of scalar f at x by central differences (x modified in place, then restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)
