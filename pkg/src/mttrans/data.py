"""Synthetic domain-shift benchmark: rendering, corruption, augmentation, I/O.

Source images are clean renderings of geometric shapes on smooth backgrounds,
one class per shape kind. Target images are drawn from the same layout
distribution and then corrupted (blur, per-channel color shift, fog).
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DomainError, FormatError

logger = logging.getLogger(__name__)

SHAPE_NAMES = ("square", "circle", "triangle", "cross", "ring", "diamond")
FOG_GRAY = 0.8
FOG_BOTTOM = 0.6  # gradient value at the bottom row; top row is 1.0
MIN_BOX_SIDE = 1e-3


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class ImageBatch:
    pixels: torch.Tensor  # (B, 3, H, W) in [0, 1]
    domain_tag: Domain
    image_ids: list[int]

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ConfigurationError("pixels must be rank-4 (B, C, H, W)")
        h, w = self.pixels.shape[-2:]
        if h % 32 or w % 32:
            raise ConfigurationError(f"image size {h}x{w} is not a multiple of 32")
        if len(self.image_ids) != self.pixels.shape[0]:
            raise ConfigurationError("one image id per image is required")
        if self.pixels.numel() and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise DomainError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass
class AnnotationSet:
    boxes: np.ndarray  # (N, 4) normalized cxcywh
    class_ids: np.ndarray  # (N,) int
    image_id: int
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.class_ids):
            raise FormatError("boxes and class_ids differ in length")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(self.scores) != len(self.class_ids):
                raise FormatError("scores and class_ids differ in length")

    def __len__(self) -> int:
        return len(self.class_ids)

    def is_valid(self, atol: float = 1e-9) -> bool:
        b = self.boxes
        if not len(b):
            return True
        x0, x1 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
        y0, y1 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
        return bool(
            (b[:, 2] > 0).all()
            and (b[:, 3] > 0).all()
            and (x0 >= -atol).all()
            and (y0 >= -atol).all()
            and (x1 <= 1 + atol).all()
            and (y1 <= 1 + atol).all()
        )


@dataclass(frozen=True)
class ShiftConfig:
    fog_intensity: float = 0.6
    color_shift: tuple[float, float, float] = (0.05, 0.0, -0.05)
    blur_radius: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fog_intensity <= 1.0:
            raise ConfigurationError(f"fog_intensity must be in [0, 1], got {self.fog_intensity}")
        if len(self.color_shift) != 3 or any(abs(c) > 0.3 for c in self.color_shift):
            raise ConfigurationError("color_shift must be 3 offsets in [-0.3, 0.3]")
        if self.blur_radius < 0:
            raise ConfigurationError("blur_radius must be non-negative")

    @property
    def is_identity(self) -> bool:
        return self.fog_intensity == 0 and not any(self.color_shift) and self.blur_radius == 0


@dataclass
class ImageRecord:
    image_id: int
    file_name: str
    width: int
    height: int
    annotations: AnnotationSet


@dataclass
class DatasetManifest:
    root: Path
    split: str
    records: list[ImageRecord]
    categories: list[str]
    seed: int
    domain: Domain = Domain.SOURCE
    pixels: list[np.ndarray] | None = field(default=None, repr=False)  # uint8 (H, W, 3), in memory only

    @property
    def path(self) -> Path:
        return Path(self.root) / self.split / "manifest.json"

    def validate(self) -> None:
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise FormatError(f"duplicate image ids in split {self.split!r}")
        for r in self.records:
            a = r.annotations
            if len(a) and (a.class_ids.min() < 0 or a.class_ids.max() >= len(self.categories)):
                raise FormatError(f"image {r.image_id}: category id not in class table")
            if not a.is_valid(atol=1e-6):
                raise FormatError(f"image {r.image_id}: box outside unit square or degenerate")


# ---------------------------------------------------------------------------
# rendering and corruption


def _shape_mask(kind: str, xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, s: float) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    r = s / 2
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "circle":
        return dx**2 + dy**2 <= r**2
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "cross":
        t = s / 6
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    if kind == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ConfigurationError(f"unknown shape {kind!r}")


def render_scene(rng: np.random.Generator, image_size: int, n_classes: int, max_objects: int = 3):
    """Render one clean scene; returns (float image (3, H, W), AnnotationSet without id)."""
    size = image_size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    base = rng.uniform(0.15, 0.55, size=3)
    gx, gy = rng.uniform(-0.1, 0.1, size=(2, 3))
    img = (
        base[:, None, None]
        + gx[:, None, None] * (xx / size - 0.5)[None]
        + gy[:, None, None] * (yy / size - 0.5)[None]
        + rng.normal(0.0, 0.02, size=(3, size, size))
    )
    n_obj = int(rng.integers(1, max_objects + 1))
    placed: list[tuple[float, float, float, float]] = []
    boxes, classes = [], []
    for _ in range(n_obj):
        for _attempt in range(20):
            s = rng.uniform(0.18, 0.4) * size
            cx, cy = rng.uniform(s / 2 + 1, size - s / 2 - 1, size=2)
            box = (cx - s / 2 - 1, cy - s / 2 - 1, cx + s / 2 + 1, cy + s / 2 + 1)
            if all(box[2] <= p[0] or p[2] <= box[0] or box[3] <= p[1] or p[3] <= box[1] for p in placed):
                break
        else:
            continue
        kind = int(rng.integers(n_classes))
        mask = _shape_mask(SHAPE_NAMES[kind], xx, yy, cx, cy, s)
        if not mask.any():
            continue
        while True:
            color = rng.uniform(0.0, 1.0, size=3)
            if np.abs(color - base).mean() >= 0.25:
                break
        img[:, mask] = color[:, None] + rng.normal(0.0, 0.02, size=(3, int(mask.sum())))
        rows, cols = np.nonzero(mask)
        x0, x1 = cols.min() / size, (cols.max() + 1) / size
        y0, y1 = rows.min() / size, (rows.max() + 1) / size
        boxes.append(((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0))
        classes.append(kind)
        placed.append(box)
    return np.clip(img, 0.0, 1.0), AnnotationSet(np.array(boxes).reshape(-1, 4), np.array(classes), image_id=-1)


def fog_layer(height: int, width: int) -> np.ndarray:
    """Light-gray fog modulated by a vertical gradient (1 at the top row)."""
    grad = np.linspace(1.0, FOG_BOTTOM, height) if height > 1 else np.ones(1)
    return np.broadcast_to((FOG_GRAY * grad)[:, None], (height, width))


def apply_fog(image: np.ndarray, intensity: float) -> np.ndarray:
    """Blend a (C, H, W) image toward the fog layer; intensity 0 is the identity."""
    if not 0.0 <= intensity <= 1.0:
        raise DomainError(f"fog intensity must lie in [0, 1], got {intensity}")
    image = np.asarray(image, dtype=np.float64)
    if intensity == 0:
        return image.copy()
    fog = fog_layer(*image.shape[-2:])[None]
    return np.clip((1.0 - intensity) * image + intensity * fog, 0.0, 1.0)


def corrupt(image: np.ndarray, shift: ShiftConfig) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64)
    if shift.blur_radius > 0:
        out = np.stack([gaussian_filter(c, sigma=shift.blur_radius, mode="nearest") for c in out])
    if any(shift.color_shift):
        out = np.clip(out + np.asarray(shift.color_shift)[:, None, None], 0.0, 1.0)
    return apply_fog(out, shift.fog_intensity)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def _image_rng(seed: int, split_index: int, image_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, split_index, image_id])


SPLITS = (("source_train", Domain.SOURCE), ("target_train", Domain.TARGET), ("target_val", Domain.TARGET))


def generate_split(
    split: str,
    n_images: int,
    image_size: int,
    n_classes: int,
    seed: int,
    shift: ShiftConfig | None = None,
    root: str | Path = ".",
    split_index: int = 0,
) -> DatasetManifest:
    records, pixels = [], []
    for image_id in range(n_images):
        rng = _image_rng(seed, split_index, image_id)
        img, ann = render_scene(rng, image_size, n_classes)
        if shift is not None:
            img = corrupt(img, shift)
        ann.image_id = image_id
        pixels.append(to_uint8(img))
        records.append(ImageRecord(image_id, f"{image_id}.png", image_size, image_size, ann))
    domain = Domain.SOURCE if shift is None else Domain.TARGET
    return DatasetManifest(Path(root), split, records, list(SHAPE_NAMES[:n_classes]), seed, domain, pixels)


def generate_synthetic_dataset(
    n_train_source: int = 200,
    n_train_target: int = 200,
    n_val_target: int = 100,
    image_size: int = 64,
    n_classes: int = 5,
    shift: ShiftConfig | None = None,
    seed: int = 0,
    out: str | Path | None = None,
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Render (source-train, target-train, target-val); writes them under ``out`` if given.

    Each image draws from its own RNG stream keyed on (seed, split, image_id), so
    the output is bit-reproducible and independent of generation order.
    """
    counts = (n_train_source, n_train_target, n_val_target)
    if any(int(c) < 1 for c in counts):
        raise ConfigurationError("all split sizes must be >= 1")
    if image_size < 32 or image_size % 32:
        raise ConfigurationError(f"image_size must be a positive multiple of 32, got {image_size}")
    if not 2 <= n_classes <= len(SHAPE_NAMES):
        raise ConfigurationError(f"n_classes must be in [2, {len(SHAPE_NAMES)}]")
    shift = shift or ShiftConfig(seed=seed)
    root = Path(out) if out is not None else Path(".")
    manifests = []
    for idx, ((name, domain), n) in enumerate(zip(SPLITS, counts)):
        m = generate_split(
            name, n, image_size, n_classes, seed, shift if domain is Domain.TARGET else None, root, idx
        )
        manifests.append(m)
        if out is not None:
            write_manifest(m)
    return tuple(manifests)


# ---------------------------------------------------------------------------
# manifest I/O


def manifest_to_dict(m: DatasetManifest, with_scores: bool = False) -> dict:
    annotations = []
    for r in m.records:
        a = r.annotations
        for k in range(len(a)):
            entry = {"image_id": r.image_id, "bbox": [float(v) for v in a.boxes[k]], "category_id": int(a.class_ids[k])}
            if with_scores and a.scores is not None:
                entry["score"] = float(a.scores[k])
            annotations.append(entry)
    return {
        "split": m.split,
        "domain": m.domain.value,
        "images": [{"id": r.image_id, "file_name": r.file_name, "width": r.width, "height": r.height} for r in m.records],
        "annotations": annotations,
        "categories": [{"id": i, "name": n} for i, n in enumerate(m.categories)],
        "seed": m.seed,
    }


def write_manifest(m: DatasetManifest) -> Path:
    split_dir = Path(m.root) / m.split
    image_dir = split_dir / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
        if m.pixels is not None:
            for r, px in zip(m.records, m.pixels):
                Image.fromarray(px, mode="RGB").save(image_dir / r.file_name, optimize=False)
        m.path.write_text(json.dumps(manifest_to_dict(m), indent=1))
    except OSError as exc:
        raise OSError(f"cannot write split {m.split!r} under {split_dir}: {exc}") from exc
    return m.path


def read_manifest(path: str | Path, load_pixels: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    try:
        categories = [c["name"] for c in sorted(raw["categories"], key=lambda c: c["id"])]
        per_image: dict[int, list[dict]] = {int(im["id"]): [] for im in raw["images"]}
        for a in raw["annotations"]:
            if len(a["bbox"]) != 4:
                raise FormatError(f"{path}: bbox must have 4 values")
            per_image[int(a["image_id"])].append(a)
        records = []
        for im in raw["images"]:
            anns = per_image[int(im["id"])]
            scores = [float(a["score"]) for a in anns] if anns and all("score" in a for a in anns) else None
            ann = AnnotationSet(
                [[float(v) for v in a["bbox"]] for a in anns],
                [int(a["category_id"]) for a in anns],
                int(im["id"]),
                None if scores is None else np.array(scores),
            )
            records.append(ImageRecord(int(im["id"]), str(im["file_name"]), int(im["width"]), int(im["height"]), ann))
        m = DatasetManifest(
            path.parent.parent,
            raw.get("split", path.parent.name),
            records,
            categories,
            int(raw["seed"]),
            Domain(raw.get("domain", "source")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed manifest ({exc!r})") from exc
    m.validate()
    if load_pixels:
        m.pixels = []
        for r in m.records:
            f = path.parent / "images" / r.file_name
            if not f.exists():
                raise FileNotFoundError(f"missing image file: {f}")
            px = np.asarray(Image.open(f).convert("RGB"))
            if px.shape != (r.height, r.width, 3):
                raise FormatError(f"{f}: expected {r.height}x{r.width} RGB, got {px.shape}")
            m.pixels.append(px)
    return m


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    p_flip: float = 0.5
    max_crop: float = 0.05  # fraction trimmed from each side at most
    p_color: float = 0.8
    jitter: float = 0.4
    p_gray: float = 0.2
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    p_erase: float = 0.7
    n_erase: int = 2
    max_erase_area: float = 0.10

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(p_flip=0, max_crop=0, p_color=0, p_gray=0, p_blur=0, p_erase=0)


def hflip(image: np.ndarray, ann: AnnotationSet) -> tuple[np.ndarray, AnnotationSet]:
    boxes = ann.boxes.copy()
    boxes[:, 0] = 1.0 - boxes[:, 0]
    return image[..., ::-1].copy(), AnnotationSet(boxes, ann.class_ids.copy(), ann.image_id, ann.scores)


def resized_crop(image: np.ndarray, ann: AnnotationSet, window: tuple[float, float, float, float]):
    """Crop the normalized xyxy window and resize back to the input size."""
    c, h, w = image.shape
    x0, y0, x1, y1 = window
    r0, r1 = int(round(y0 * h)), int(round(y1 * h))
    c0, c1 = int(round(x0 * w)), int(round(x1 * w))
    x0, x1, y0, y1 = c0 / w, c1 / w, r0 / h, r1 / h
    crop = torch.from_numpy(np.ascontiguousarray(image[:, r0:r1, c0:c1]))[None]
    out = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)[0].numpy()
    b = ann.boxes
    xy = np.stack([b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2], 1)
    xy[:, [0, 2]] = (np.clip(xy[:, [0, 2]], x0, x1) - x0) / (x1 - x0)
    xy[:, [1, 3]] = (np.clip(xy[:, [1, 3]], y0, y1) - y0) / (y1 - y0)
    xy = np.clip(xy, 0.0, 1.0)
    wh = xy[:, 2:] - xy[:, :2]
    keep = (wh > MIN_BOX_SIDE).all(1)
    xy, wh = xy[keep], wh[keep]
    boxes = np.concatenate([(xy[:, :2] + xy[:, 2:]) / 2, wh], 1)
    scores = None if ann.scores is None else ann.scores[keep]
    return np.clip(out, 0.0, 1.0), AnnotationSet(boxes, ann.class_ids[keep], ann.image_id, scores)


def augment_weak(image, ann: AnnotationSet, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()):
    """Horizontal flip and a mild (<= max_crop per side) resized crop."""
    image = np.asarray(image, dtype=np.float32)
    if policy.p_flip > 0 and rng.random() < policy.p_flip:
        image, ann = hflip(image, ann)
    if policy.max_crop > 0:
        x0, y0, x1, y1 = rng.uniform(0, policy.max_crop, size=4)
        image, ann = resized_crop(image, ann, (x0, y0, 1 - x1, 1 - y1))
    return image, ann


def sample_erase_rect(rng: np.random.Generator, height: int, width: int, max_area: float = 0.10):
    """(top, left, h, w) of an erasing rectangle covering at most max_area of the image."""
    frac = rng.uniform(0.02, max_area)
    aspect = np.exp(rng.uniform(np.log(0.3), np.log(1 / 0.3)))
    budget = frac * height * width
    eh = max(1, min(height, int(np.sqrt(budget * aspect))))
    ew = max(1, min(width, int(budget / eh)))
    top = int(rng.integers(0, height - eh + 1))
    left = int(rng.integers(0, width - ew + 1))
    return top, left, eh, ew


def _grayscale(image: np.ndarray) -> np.ndarray:
    g = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    return np.broadcast_to(g, image.shape).copy()


def strong_photometric(image: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()):
    """Color jitter, grayscale, blur and random erasing; never moves boxes."""
    image = np.asarray(image, dtype=np.float32).copy()
    if policy.p_color > 0 and rng.random() < policy.p_color:
        b, c, s = 1 + rng.uniform(-policy.jitter, policy.jitter, size=3)
        image = image * b
        image = (image - image.mean()) * c + image.mean()
        gray = _grayscale(image)
        image = np.clip((image - gray) * s + gray, 0.0, 1.0)
    if policy.p_gray > 0 and rng.random() < policy.p_gray:
        image = _grayscale(image)
    if policy.p_blur > 0 and rng.random() < policy.p_blur:
        sigma = rng.uniform(*policy.blur_sigma)
        image = np.stack([gaussian_filter(ch, sigma=sigma, mode="nearest") for ch in image])
    if policy.p_erase > 0:
        _, h, w = image.shape
        for _ in range(policy.n_erase):
            if rng.random() < policy.p_erase:
                top, left, eh, ew = sample_erase_rect(rng, h, w, policy.max_erase_area)
                image[:, top : top + eh, left : left + ew] = rng.uniform(0, 1, size=(3, 1, 1))
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def augment_strong(image, ann: AnnotationSet, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()):
    image, ann = augment_weak(image, ann, rng, policy)
    return strong_photometric(image, rng, policy), ann


# ---------------------------------------------------------------------------
# loading


class DetectionDataset:
    """An in-memory split with seeded, epoch-reproducible batching."""

    def __init__(self, manifest: DatasetManifest):
        if manifest.pixels is None:
            raise FormatError(f"split {manifest.split!r} has no pixels loaded")
        if not manifest.records:
            raise ConfigurationError(f"split {manifest.split!r} is empty")
        self.manifest = manifest
        self.domain = manifest.domain
        self.images = np.stack([p.transpose(2, 0, 1) for p in manifest.pixels]).astype(np.float32) / 255.0
        self.annotations = [r.annotations for r in manifest.records]
        self.image_ids = [r.image_id for r in manifest.records]

    @classmethod
    def load(cls, path: str | Path) -> "DetectionDataset":
        return cls(read_manifest(path))

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def n_classes(self) -> int:
        return len(self.manifest.categories)

    def order(self, seed: int, epoch: int, shuffle: bool = True, stream: int = 0) -> np.ndarray:
        if not shuffle:
            return np.arange(len(self))
        return np.random.default_rng([seed, stream, epoch]).permutation(len(self))

    def batches(
        self, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True, stream: int = 0
    ) -> Iterator[tuple[ImageBatch, list[AnnotationSet]]]:
        idx = self.order(seed, epoch, shuffle, stream)
        for start in range(0, len(idx), batch_size):
            sel = idx[start : start + batch_size]
            yield self.batch(sel)

    def cycle(self, batch_size: int, seed: int, stream: int, start_epoch: int = 0):
        """Endless batches, reshuffled every pass; used for the auxiliary domain."""
        epoch = start_epoch
        while True:
            yield from self.batches(batch_size, seed, epoch, True, stream)
            epoch += 1

    def batch(self, indices: Sequence[int]) -> tuple[ImageBatch, list[AnnotationSet]]:
        sel = list(indices)
        pixels = torch.from_numpy(self.images[sel])
        return (
            ImageBatch(pixels, self.domain, [self.image_ids[i] for i in sel]),
            [self.annotations[i] for i in sel],
        )


def load_dataset(manifest_path, batch_size: int = 4, seed: int = 0, epoch: int = 0, shuffle: bool = True):
    return DetectionDataset.load(manifest_path).batches(batch_size, seed, epoch, shuffle)
