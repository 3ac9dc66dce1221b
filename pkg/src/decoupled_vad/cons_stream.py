"""Semantic consistency stream with a Gaussian mixture temporal prior."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nncore import (
    DEFAULT_TAU,
    DimensionError,
    GCNLayer,
    GraphTransformerLayer,
    Linear,
    SCORE_EPS,
    PositionalEmbedding,
    alignment_scores,
    build_adjacency,
    make_generator,
    orthogonal_rows,
    score_head,
)
from .sens_stream import ANOMALY, T_MAX

N_COMPONENTS = 5
N_GCN_LAYERS = 3
SIGMA_FLOOR = 1.0


class NumericError(ArithmeticError):
    pass


@dataclass
class GaussianMixturePrior:
    mu: torch.Tensor     # (..., K) centres in frames
    sigma: torch.Tensor  # (..., K) temporal scales in frames
    pi: torch.Tensor     # (..., T, K) per-frame mixture weights

    @property
    def K(self) -> int:
        return self.mu.shape[-1]


class ConsistencyModel(nn.Module):
    kind = "cons"

    def __init__(self, d: int, K: int = N_COMPONENTS, seed: int = 0, t_max: int = T_MAX,
                 n_gcn_layers: int = N_GCN_LAYERS, tau: float = DEFAULT_TAU):
        super().__init__()
        if K < 1:
            raise ValueError("K must be >= 1")
        g = make_generator(seed)
        self.d, self.K, self.tau = d, K, tau
        self.positional_embedding = PositionalEmbedding(t_max, d, g)
        self.transformer_layer = GraphTransformerLayer(d, g)
        self.gcn_layers = nn.ModuleList(GCNLayer(d, d, g) for _ in range(n_gcn_layers))
        self.classifier = Linear(d, 1, g)
        self.gmp_head = Linear(d, 3 * K, g)
        self.class_embeddings = nn.Parameter(orthogonal_rows(2, d, g))

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        A = build_adjacency(x.shape[-2], self.tau, x.dtype)
        h = self.transformer_layer(self.positional_embedding(x), A)
        for layer in self.gcn_layers:
            h = layer(h, A)
        return h

    def forward(self, x: torch.Tensor) -> dict:
        h = self.hidden(x)
        T = x.shape[-2]
        scores = score_head(self.classifier(h)).squeeze(-1)
        align = alignment_scores(h, self.class_embeddings[ANOMALY])
        raw = self.gmp_head(h)
        prior = pool_gmp_params(raw, align, T)
        return {"scores": scores, "align": align, "raw": raw, "prior": prior, "G": eval_prior(prior, T)}


def cons_forward(model: ConsistencyModel, x: torch.Tensor) -> dict:
    return model(x)


def pool_gmp_params(raw: torch.Tensor, align: torch.Tensor, T: int,
                    sigma_floor: float = SIGMA_FLOOR) -> GaussianMixturePrior:
    """Turn per-frame ``(mu, sigma, pi-logit)`` triplets into a video-level prior.

    ``raw`` is ``(..., T, 3K)`` laid out as ``K`` consecutive triplets.
    Centres and scales are averaged over time; mixture weights stay per
    frame, gated by the alignment score before the softmax over components.
    """
    if raw.shape[-1] % 3:
        raise DimensionError(f"last axis {raw.shape[-1]} is not a multiple of 3")
    if not torch.isfinite(raw).all():
        raise NumericError("non-finite GMP parameters")
    trip = raw.reshape(*raw.shape[:-1], raw.shape[-1] // 3, 3)
    pooled = trip.mean(dim=-3)
    # clamp keeps mu < T once the sigmoid saturates to 1 in float32
    mu = (T * torch.sigmoid(pooled[..., 0])).clamp(max=T * (1 - SCORE_EPS))
    sigma = sigma_floor + T * F.softplus(pooled[..., 1]) / 4
    pi = torch.softmax(align.unsqueeze(-1) * trip[..., 2], dim=-1)
    return GaussianMixturePrior(mu, sigma, pi)


def eval_prior(prior: GaussianMixturePrior, T: int) -> torch.Tensor:
    t = torch.arange(T, dtype=prior.mu.dtype).unsqueeze(-1)  # (T, 1)
    bumps = torch.exp(-((t - prior.mu.unsqueeze(-2)) ** 2) / (2 * prior.sigma.unsqueeze(-2) ** 2))
    return (prior.pi * bumps).sum(dim=-1)


def gmp_loss(scores: torch.Tensor, G: torch.Tensor) -> torch.Tensor:
    """Mean squared deviation of the scores from the prior curve."""
    if scores.shape != G.shape:
        raise DimensionError(f"score shape {tuple(scores.shape)} != prior shape {tuple(G.shape)}")
    return ((scores - G) ** 2).mean()
