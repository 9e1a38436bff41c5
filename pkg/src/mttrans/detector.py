"""A small Deformable-DETR-style detector.

Multi-scale CNN features are flattened into one token sequence, mixed by dense
cross-scale self-attention in the encoder, and read out by a query-based
decoder. Deformable sampling is replaced by dense attention over all tokens,
which is cheap at the image sizes this package targets (84 tokens at 64x64).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .boxes import pairwise_giou
from .errors import CapacityError, ConfigurationError

STRIDES = (8, 16, 32)


@dataclass
class DetectorConfig:
    d_model: int = 128
    n_heads: int = 8
    n_enc: int = 3
    n_dec: int = 3
    n_queries: int = 20
    n_classes: int = 5
    ffn_dim: int = 256
    backbone_channels: tuple[int, int, int, int] = (32, 64, 128, 128)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        if "backbone_channels" in d:
            d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d)


@dataclass
class MultiScaleTokens:
    tokens: torch.Tensor  # (B, T, d)
    level_index: torch.Tensor  # (T,)
    spatial_shapes: list[tuple[int, int]]
    position_encoding: torch.Tensor  # (B, T, d)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    def replace(self, tokens: torch.Tensor) -> "MultiScaleTokens":
        return MultiScaleTokens(tokens, self.level_index, self.spatial_shapes, self.position_encoding)


@dataclass
class DecoderOutput:
    features: torch.Tensor  # (B, Q, d)
    class_logits: torch.Tensor  # (B, Q, K + 1); index K is "no object"
    box_preds: torch.Tensor  # (B, Q, 4) cxcywh in (0, 1)

    def row(self, i: int) -> "DecoderOutput":
        return DecoderOutput(self.features[i : i + 1], self.class_logits[i : i + 1], self.box_preds[i : i + 1])


@dataclass
class DetectorOutput:
    decoder: DecoderOutput
    memory: MultiScaleTokens
    enc_global: torch.Tensor | None = None  # (B, d)
    dec_global: torch.Tensor | None = None  # (B, d)


# ---------------------------------------------------------------------------
# backbone


def _conv(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(8, cout), nn.ReLU(inplace=True))


class Backbone(nn.Module):
    """Four conv stages; stages 2-4 (strides 8/16/32) are projected to d channels."""

    def __init__(self, channels=(32, 64, 128, 128), d_model: int = 128):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.stages = nn.ModuleList(
            [
                nn.Sequential(_conv(3, c1, 2), _conv(c1, c1, 2)),
                nn.Sequential(_conv(c1, c2, 2), _conv(c2, c2, 1)),
                nn.Sequential(_conv(c2, c3, 2), _conv(c3, c3, 1)),
                nn.Sequential(_conv(c3, c4, 2), _conv(c4, c4, 1)),
            ]
        )
        self.proj = nn.ModuleList(
            [nn.Sequential(nn.Conv2d(c, d_model, 1), nn.GroupNorm(math.gcd(32, d_model), d_model)) for c in (c2, c3, c4)]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ConfigurationError(f"image size {h}x{w} is not a multiple of 32")
        maps = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i > 0:
                maps.append(self.proj[i - 1](x))
        return maps


def sine_position_encoding(h: int, w: int, d_model: int, temperature: float = 10000.0) -> torch.Tensor:
    """2-D sinusoidal encoding of normalized cell centres, (h*w, d_model)."""
    half = d_model // 2
    y = (torch.arange(h, dtype=torch.float32) + 0.5) / h * 2 * math.pi
    x = (torch.arange(w, dtype=torch.float32) + 0.5) / w * 2 * math.pi
    dim_t = temperature ** (2 * (torch.arange(half) // 2) / half)
    py = y[:, None] / dim_t
    px = x[:, None] / dim_t
    py = torch.stack([py[:, 0::2].sin(), py[:, 1::2].cos()], dim=2).flatten(1)
    px = torch.stack([px[:, 0::2].sin(), px[:, 1::2].cos()], dim=2).flatten(1)
    pos = torch.cat([py[:, None, :].expand(h, w, half), px[None, :, :].expand(h, w, half)], dim=-1)
    return pos.reshape(h * w, d_model)


def sine_point_encoding(points: torch.Tensor, d_model: int, temperature: float = 10000.0) -> torch.Tensor:
    """Encode normalized (x, y) points (..., 2) with the same basis as the token grid."""
    half = d_model // 2
    dim_t = temperature ** (2 * (torch.arange(half, device=points.device) // 2) / half)
    px = points[..., 0:1] * 2 * math.pi / dim_t
    py = points[..., 1:2] * 2 * math.pi / dim_t
    px = torch.stack([px[..., 0::2].sin(), px[..., 1::2].cos()], dim=-1).flatten(-2)
    py = torch.stack([py[..., 0::2].sin(), py[..., 1::2].cos()], dim=-1).flatten(-2)
    return torch.cat([py, px], dim=-1)


def tokenize(feature_maps: list[torch.Tensor], level_embed: torch.Tensor | None = None) -> MultiScaleTokens:
    """Row-major flatten each level, concatenate in level order, attach encodings."""
    tokens, pos, levels, shapes = [], [], [], []
    for lvl, fmap in enumerate(feature_maps):
        b, d, h, w = fmap.shape
        shapes.append((h, w))
        tokens.append(fmap.flatten(2).transpose(1, 2))
        p = sine_position_encoding(h, w, d).to(fmap)
        if level_embed is not None:
            p = p + level_embed[lvl]
        pos.append(p[None].expand(b, -1, -1))
        levels.append(torch.full((h * w,), lvl, dtype=torch.long))
    return MultiScaleTokens(torch.cat(tokens, 1), torch.cat(levels), shapes, torch.cat(pos, 1))


def token_centers(spatial_shapes: list[tuple[int, int]]) -> torch.Tensor:
    """Normalized (x, y) cell centres of every token, (T, 2)."""
    out = []
    for h, w in spatial_shapes:
        y, x = torch.meshgrid((torch.arange(h) + 0.5) / h, (torch.arange(w) + 0.5) / w, indexing="ij")
        out.append(torch.stack([x.flatten(), y.flatten()], -1))
    return torch.cat(out)


def detokenize(ms: MultiScaleTokens) -> list[torch.Tensor]:
    out, start = [], 0
    b, _, d = ms.tokens.shape
    for h, w in ms.spatial_shapes:
        out.append(ms.tokens[:, start : start + h * w].transpose(1, 2).reshape(b, d, h, w))
        start += h * w
    return out


# ---------------------------------------------------------------------------
# transformer


class FFN(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, d))
        self.norm = nn.LayerNorm(d)

    def forward(self, x):
        return self.norm(x + self.net(x))


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm = nn.LayerNorm(d)
        self.ffn = FFN(d, ffn_dim)

    def forward(self, x, pos):
        q = x + pos
        x = self.norm(x + self.attn(q, q, x, need_weights=False)[0])
        return self.ffn(x)


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.cross_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FFN(d, ffn_dim)

    def forward(self, tgt, query_pos, memory, memory_pos, cross_pos=None, cross_bias=None):
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt, need_weights=False)[0])
        cq = tgt + (query_pos if cross_pos is None else cross_pos)
        attn = self.cross_attn(cq, memory + memory_pos, memory, attn_mask=cross_bias, need_weights=False)[0]
        tgt = self.norm2(tgt + attn)
        return self.ffn(tgt)


class MLP(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, n_layers: int):
        super().__init__()
        dims = [d_in] + [hidden] * (n_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class Detector(nn.Module):
    def __init__(self, config: DetectorConfig | None = None):
        super().__init__()
        self.config = cfg = config or DetectorConfig()
        d = cfg.d_model
        self.backbone = Backbone(cfg.backbone_channels, d)
        self.level_embed = nn.Parameter(torch.randn(len(STRIDES), d) * 0.02)
        self.encoder = nn.ModuleList(EncoderLayer(d, cfg.n_heads, cfg.ffn_dim) for _ in range(cfg.n_enc))
        self.decoder = nn.ModuleList(DecoderLayer(d, cfg.n_heads, cfg.ffn_dim) for _ in range(cfg.n_dec))
        self.query_embed = nn.Parameter(torch.randn(cfg.n_queries, d))
        self.reference = nn.Linear(d, 2)
        self.ref_pos = MLP(d, d, d, 2)
        # per-head width of the Gaussian locality prior in decoder cross-attention
        self.spatial_log_sigma = nn.Parameter(torch.log(torch.linspace(0.08, 0.4, cfg.n_heads)))
        self.class_head = nn.Linear(d, cfg.n_classes + 1)
        self.box_head = MLP(d, d, 4, 3)
        nn.init.zeros_(self.box_head.layers[-1].weight)
        nn.init.zeros_(self.box_head.layers[-1].bias)
        nn.init.constant_(self.box_head.layers[-1].bias[2:], -2.0)
        nn.init.uniform_(self.reference.bias, -1.5, 1.5)

    # individual stages are exposed for testing and for the alignment heads

    def extract_features(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        return self.backbone((pixels - PIXEL_MEAN) / PIXEL_STD)

    def tokenize(self, maps: list[torch.Tensor]) -> MultiScaleTokens:
        return tokenize(maps, self.level_embed)

    def encode(self, ms: MultiScaleTokens, domain_query: torch.Tensor | None = None):
        """Run the encoder; a domain query, if given, is token 0 and returned separately."""
        x, pos = ms.tokens, ms.position_encoding
        if x.shape[-1] != self.config.d_model:
            raise ConfigurationError(f"token width {x.shape[-1]} != model width {self.config.d_model}")
        if domain_query is not None:
            b = x.shape[0]
            x = torch.cat([domain_query.reshape(1, 1, -1).expand(b, 1, -1), x], 1)
            pos = torch.cat([pos.new_zeros(b, 1, pos.shape[-1]), pos], 1)
        for layer in self.encoder:
            x = layer(x, pos)
        if domain_query is not None:
            return ms.replace(x[:, 1:]), x[:, 0]
        return ms.replace(x), None

    def decode(self, memory: MultiScaleTokens, domain_query: torch.Tensor | None = None, queries=None):
        mem = memory.tokens
        b, _, d = mem.shape
        if d != self.config.d_model:
            raise ConfigurationError(f"memory width {d} != model width {self.config.d_model}")
        queries = self.query_embed if queries is None else queries
        query_pos = queries[None].expand(b, -1, -1)
        tgt = query_pos
        n_q = queries.shape[0]
        ref = torch.sigmoid(self.reference(queries))[None].expand(b, -1, -1)
        # cross-attention is steered toward each query's reference point
        cross_pos = query_pos + self.ref_pos(sine_point_encoding(ref, d))
        centers = token_centers(memory.spatial_shapes).to(mem)
        dist2 = ((ref[:, :, None, :] - centers[None, None]) ** 2).sum(-1)
        inv_var = torch.exp(-2 * self.spatial_log_sigma)[None, :, None, None]
        bias = -0.5 * dist2[:, None] * inv_var  # (B, heads, Q, T)
        if domain_query is not None:
            tgt = torch.cat([tgt, domain_query.reshape(1, 1, -1).expand(b, 1, -1)], 1)
            query_pos = torch.cat([query_pos, query_pos.new_zeros(b, 1, d)], 1)
            cross_pos = torch.cat([cross_pos, cross_pos.new_zeros(b, 1, d)], 1)
            bias = torch.cat([bias, bias.new_zeros(b, bias.shape[1], 1, bias.shape[-1])], 2)
        bias = bias.flatten(0, 1)
        for layer in self.decoder:
            tgt = layer(tgt, query_pos, mem, memory.position_encoding, cross_pos, bias)
        hs = tgt[:, :n_q]
        delta = self.box_head(hs)
        boxes = torch.sigmoid(delta + torch.cat([inverse_sigmoid(ref), torch.zeros_like(ref)], -1))
        out = DecoderOutput(hs, self.class_head(hs), boxes)
        return out, (tgt[:, n_q] if domain_query is not None else None)

    def forward(self, pixels: torch.Tensor, enc_domain_query=None, dec_domain_query=None) -> DetectorOutput:
        ms = self.tokenize(self.extract_features(pixels))
        memory, enc_global = self.encode(ms, enc_domain_query)
        dec, dec_global = self.decode(memory, dec_domain_query)
        return DetectorOutput(dec, memory, enc_global, dec_global)


# ---------------------------------------------------------------------------
# matching and loss


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    no_object: float = 0.1


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def query_indices(self) -> list[int]:
        return [p[0] for p in self.pairs]

    @property
    def target_indices(self) -> list[int]:
        return [p[1] for p in self.pairs]


def assign(cost: np.ndarray) -> MatchResult:
    """Exact minimum-cost injective assignment of rows (queries) to columns (targets)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape[1] > cost.shape[0]:
        raise CapacityError(f"{cost.shape[1]} targets exceed {cost.shape[0]} queries")
    rows, cols = linear_sum_assignment(cost)
    return MatchResult(sorted(zip(rows.tolist(), cols.tolist()), key=lambda p: p[1]))


def match_cost(class_logits, box_preds, target_boxes, target_classes, weights: LossWeights = LossWeights()):
    """(Q, N) matching cost for one image."""
    prob = class_logits.softmax(-1)
    c_cls = -prob[:, target_classes]
    c_l1 = torch.cdist(box_preds, target_boxes, p=1)
    c_giou = 1 - pairwise_giou(box_preds, target_boxes)
    return weights.cls * c_cls + weights.l1 * c_l1 + weights.giou * c_giou


@torch.no_grad()
def hungarian_match(predictions: DecoderOutput, targets, weights: LossWeights = LossWeights()) -> MatchResult:
    """Match the queries of a single-image prediction row to its targets."""
    logits = predictions.class_logits.reshape(-1, predictions.class_logits.shape[-1])
    boxes = predictions.box_preds.reshape(-1, 4)
    n_t = len(targets)
    if n_t > logits.shape[0]:
        raise CapacityError(f"{n_t} targets exceed {logits.shape[0]} queries")
    if n_t == 0:
        return MatchResult()
    tb = torch.as_tensor(targets.boxes, dtype=boxes.dtype)
    tc = torch.as_tensor(targets.class_ids, dtype=torch.long)
    return assign(match_cost(logits, boxes, tb, tc, weights).cpu().numpy())


def detection_loss(predictions: DecoderOutput, targets, weights: LossWeights = LossWeights()) -> dict:
    """Set-based detection loss over a batch; ``targets`` holds one AnnotationSet per image.

    Classification is a weighted cross-entropy over every query (no-object
    down-weighted), box terms cover matched pairs only. All terms are summed
    over the batch and divided by the number of target boxes (at least 1).
    """
    logits, boxes = predictions.class_logits, predictions.box_preds
    b, q, k1 = logits.shape
    bg = k1 - 1
    labels = torch.full((b, q), bg, dtype=torch.long)
    src_boxes, tgt_boxes = [], []
    for i, t in enumerate(targets):
        m = hungarian_match(predictions.row(i), t, weights)
        if m.pairs:
            qi = torch.tensor(m.query_indices)
            ti = torch.tensor(m.target_indices)
            labels[i, qi] = torch.as_tensor(t.class_ids, dtype=torch.long)[ti]
            src_boxes.append(boxes[i, qi])
            tgt_boxes.append(torch.as_tensor(t.boxes, dtype=boxes.dtype)[ti])
    n_boxes = max(sum(len(t) for t in targets), 1)
    class_weight = torch.ones(k1, dtype=logits.dtype)
    class_weight[bg] = weights.no_object
    ce = F.cross_entropy(logits.reshape(-1, k1), labels.reshape(-1), weight=class_weight, reduction="sum")
    loss_cls = ce / n_boxes
    if src_boxes:
        sb, tb = torch.cat(src_boxes), torch.cat(tgt_boxes)
        loss_l1 = (sb - tb).abs().sum() / n_boxes
        loss_giou = (1 - torch.diag(pairwise_giou(sb, tb))).sum() / n_boxes
    else:
        loss_l1 = loss_giou = logits.sum() * 0
    total = weights.cls * loss_cls + weights.l1 * loss_l1 + weights.giou * loss_giou
    return {"total": total, "cls": loss_cls, "l1": loss_l1, "giou": loss_giou}
