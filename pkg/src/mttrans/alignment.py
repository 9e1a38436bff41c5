"""Adversarial feature alignment heads.

Three heads push the student toward domain-invariant features:

* DQFA: two learned domain-query tokens, one riding through the encoder and
  one through the decoder; each resulting global token is domain-classified.
* BGPA: prototypes pooled from decoder outputs are linked to each other and
  to the instance features in a cosine-weighted graph, aggregated by a GCN,
  then domain-classified.
* TIFA: every encoder image token is domain-classified on its own.

All heads place a gradient reversal layer in front of their discriminator, so
a single minimizing optimizer step on ``det_loss - adv_loss`` trains the
discriminators to separate domains and the detector to confuse them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Domain
from .detector import DetectorOutput, MultiScaleTokens
from .errors import UsageError

PROB_EPS = 1e-6
COSINE_EPS = 1e-8
HEADS = ("dqfa_enc", "dqfa_dec", "bgpa", "tifa")


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, strength):
        ctx.strength = strength
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.strength * grad, None


def grad_reverse(x: torch.Tensor, strength: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the upstream gradient by ``-strength``."""
    return _GradReverse.apply(x, float(strength))


class DomainDiscriminator(nn.Module):
    """d -> d/2 -> 1 perceptron with a sigmoid output (probability of source)."""

    def __init__(self, d_model: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_model, d_model // 2), nn.ReLU(inplace=True), nn.Linear(d_model // 2, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x)).squeeze(-1)


def domain_adv_loss(features: torch.Tensor, domain: Domain | str, discriminator) -> torch.Tensor:
    """One domain's half of the adversarial objective, averaged over all feature vectors.

    Source: mean log D(f). Target: mean log(1 - D(f)). Probabilities are
    clamped to [1e-6, 1 - 1e-6] so the value stays finite.
    """
    p = discriminator(features.reshape(-1, features.shape[-1])).clamp(PROB_EPS, 1 - PROB_EPS)
    if Domain(domain) is Domain.SOURCE:
        return torch.log(p).mean()
    return torch.log1p(-p).mean()


# ---------------------------------------------------------------------------
# bi-level graph


@dataclass
class BiLevelGraph:
    node_features: torch.Tensor  # (M + Q, d): prototypes first
    adjacency: torch.Tensor  # (M + Q, M + Q)
    n_prototypes: int


class PrototypeGenerator(nn.Module):
    """Mean-pool decoder outputs, then a 2-layer perceptron emits M prototypes."""

    def __init__(self, d_model: int, n_prototypes: int = 9):
        super().__init__()
        self.n_prototypes = n_prototypes
        self.fc1 = nn.Linear(d_model, d_model)
        self.fc2 = nn.Linear(d_model, n_prototypes * d_model)

    def forward(self, decoder_features: torch.Tensor) -> torch.Tensor:
        pooled = decoder_features.mean(-2)
        out = self.fc2(F.relu(self.fc1(pooled)))
        return out.reshape(*pooled.shape[:-1], self.n_prototypes, pooled.shape[-1])


def cosine_matrix(x: torch.Tensor) -> torch.Tensor:
    n = x / (x.norm(dim=-1, keepdim=True) + COSINE_EPS)
    return n @ n.transpose(-1, -2)


def build_bilevel_graph(prototypes: torch.Tensor, decoder_features: torch.Tensor) -> BiLevelGraph:
    """Prototypes connect densely to each other and to every instance; instances only to themselves.

    Edge weights are cosine similarities, floored at zero so node degrees stay
    positive; every node carries a unit self-loop.
    """
    m = prototypes.shape[-2]
    nodes = torch.cat([prototypes, decoder_features], -2)
    adj = cosine_matrix(nodes).clamp(min=0.0)
    adj = (adj + adj.transpose(-1, -2)) / 2
    n = nodes.shape[-2]
    keep = torch.ones(n, n, dtype=torch.bool)
    keep[m:, m:] = False
    eye = torch.eye(n, dtype=torch.bool)
    adj = torch.where(keep & ~eye, adj, adj.new_zeros(()))
    adj = adj + torch.eye(n, dtype=adj.dtype)
    return BiLevelGraph(nodes, adj, m)


def normalize_adjacency(adj: torch.Tensor) -> torch.Tensor:
    d = adj.sum(-1).rsqrt()
    return d[..., :, None] * adj * d[..., None, :]


def gcn_propagate(adj: torch.Tensor, h: torch.Tensor, weights, activations) -> torch.Tensor:
    a = normalize_adjacency(adj)
    for w, act in zip(weights, activations):
        h = a @ h @ w
        if act is not None:
            h = act(h)
    return h


class GCN(nn.Module):
    """Two symmetric-normalized graph convolutions: ReLU, then identity."""

    def __init__(self, d_model: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(d_model, d_model))
        self.w2 = nn.Parameter(torch.empty(d_model, d_model))
        nn.init.xavier_uniform_(self.w1)
        nn.init.xavier_uniform_(self.w2)

    def forward(self, graph: BiLevelGraph) -> torch.Tensor:
        h = gcn_propagate(graph.adjacency, graph.node_features, (self.w1, self.w2), (F.relu, None))
        return h[..., : graph.n_prototypes, :]


def gcn_aggregate(graph: BiLevelGraph, gcn: GCN) -> torch.Tensor:
    return gcn(graph)


# ---------------------------------------------------------------------------
# heads


@dataclass
class AlignmentWeights:
    dqfa_enc: float = 1.0
    dqfa_dec: float = 1.0
    bgpa: float = 1.0
    tifa: float = 1.0

    def __post_init__(self):
        for h in HEADS:
            v = float(getattr(self, h))
            if not v >= 0 or v == float("inf"):
                raise ValueError(f"alignment weight {h} must be finite and >= 0, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {h: float(getattr(self, h)) for h in HEADS}

    @property
    def any(self) -> bool:
        return any(v > 0 for v in self.as_dict().values())


def adv_loss(head_losses: dict[str, torch.Tensor], weights: AlignmentWeights) -> torch.Tensor | float:
    """Weighted sum of the head losses; heads with zero weight are skipped."""
    total = 0.0
    for h, lam in weights.as_dict().items():
        if lam and h in head_losses:
            total = total + lam * head_losses[h]
    return total


class Alignment(nn.Module):
    """Domain queries, discriminators, prototype MLP and GCN; student-side only."""

    def __init__(self, d_model: int = 128, n_prototypes: int = 9, weights: AlignmentWeights | None = None,
                 grl_strength: float = 1.0):
        super().__init__()
        self.weights = weights or AlignmentWeights()
        self.grl_strength = grl_strength
        self.enc_domain_query = nn.Parameter(torch.randn(d_model) * 0.02)
        self.dec_domain_query = nn.Parameter(torch.randn(d_model) * 0.02)
        self.disc = nn.ModuleDict({h: DomainDiscriminator(d_model) for h in HEADS})
        self.prototypes = PrototypeGenerator(d_model, n_prototypes)
        self.gcn = GCN(d_model)

    def queries(self) -> tuple[torch.Tensor | None, torch.Tensor | None]:
        """Domain queries to attach to the student forward pass (None when the head is off)."""
        w = self.weights
        return (self.enc_domain_query if w.dqfa_enc > 0 else None, self.dec_domain_query if w.dqfa_dec > 0 else None)

    def dqfa_losses(self, enc_global, dec_global, domain):
        if enc_global is None or dec_global is None:
            raise UsageError("DQFA needs both encoder and decoder global tokens")
        return (
            domain_adv_loss(grad_reverse(enc_global, self.grl_strength), domain, self.disc["dqfa_enc"]),
            domain_adv_loss(grad_reverse(dec_global, self.grl_strength), domain, self.disc["dqfa_dec"]),
        )

    def bgpa_loss(self, decoder_features: torch.Tensor, domain) -> torch.Tensor:
        # The reversal sits in front of the prototype MLP and GCN, so they train
        # alongside the discriminator; only the detector is pushed adversarially.
        feats = grad_reverse(decoder_features, self.grl_strength)
        protos = self.prototypes(feats)
        graph = build_bilevel_graph(protos, feats)
        agg = gcn_aggregate(graph, self.gcn)
        return domain_adv_loss(agg, domain, self.disc["bgpa"])

    def tifa_loss(self, encoded: MultiScaleTokens | torch.Tensor, domain) -> torch.Tensor:
        tokens = encoded.tokens if isinstance(encoded, MultiScaleTokens) else encoded
        return domain_adv_loss(grad_reverse(tokens, self.grl_strength), domain, self.disc["tifa"])

    def head_losses(self, out: DetectorOutput, domain) -> dict[str, torch.Tensor]:
        """Per-head adversarial-objective halves for one domain batch; only heads with positive weight."""
        w = self.weights
        losses = {}
        if w.dqfa_enc > 0:
            if out.enc_global is None:
                raise UsageError("encoder domain token missing from the forward pass")
            losses["dqfa_enc"] = domain_adv_loss(grad_reverse(out.enc_global, self.grl_strength), domain, self.disc["dqfa_enc"])
        if w.dqfa_dec > 0:
            if out.dec_global is None:
                raise UsageError("decoder domain token missing from the forward pass")
            losses["dqfa_dec"] = domain_adv_loss(grad_reverse(out.dec_global, self.grl_strength), domain, self.disc["dqfa_dec"])
        if w.bgpa > 0:
            losses["bgpa"] = self.bgpa_loss(out.decoder.features, domain)
        if w.tifa > 0:
            losses["tifa"] = self.tifa_loss(out.memory, domain)
        return losses
