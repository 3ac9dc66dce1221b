"""Temporal sensitivity stream: parallel TCN and graph-transformer branches."""
from __future__ import annotations

import torch
import torch.nn as nn

from .nncore import (
    DEFAULT_TAU,
    TCN,
    GraphTransformerLayer,
    InvalidParameterError,
    Linear,
    PositionalEmbedding,
    act,
    alignment_scores,
    build_adjacency,
    make_generator,
    orthogonal_rows,
    score_head,
)

MODES = ("full", "tcn_only", "gt_only")
T_MAX = 512
N_TCN_BLOCKS = 7
DROPOUT = 0.3  # training-time only; the stream memorizes MIL bags without it
ANOMALY = 1  # row of class_embeddings used as the anomaly anchor


class SensitivityModel(nn.Module):
    kind = "sens"

    def __init__(self, d: int, mode: str = "full", seed: int = 0, t_max: int = T_MAX,
                 n_tcn_blocks: int = N_TCN_BLOCKS, tau: float = DEFAULT_TAU, dropout: float = DROPOUT):
        super().__init__()
        if mode not in MODES:
            raise InvalidParameterError(f"unknown sensitivity mode {mode!r}; expected one of {MODES}")
        g = make_generator(seed)
        self.d, self.mode, self.tau = d, mode, tau
        self.dropout = nn.Dropout(dropout)
        self.positional_embedding = PositionalEmbedding(t_max, d, g)
        self.tcn = TCN(d, n_tcn_blocks, g)
        self.gt_layer = GraphTransformerLayer(d, g)
        fused_in = 2 * d if mode == "full" else d
        self.fusion1 = Linear(fused_in, d, g)
        self.fusion2 = Linear(d, d, g)
        self.classifier = Linear(d, 1, g)
        self.class_embeddings = nn.Parameter(orthogonal_rows(2, d, g))

    def features(self, x: torch.Tensor, adjacency: torch.Tensor | None = None) -> torch.Tensor:
        x = self.dropout(self.positional_embedding(x))
        branches = []
        if self.mode in ("full", "tcn_only"):
            branches.append(self.tcn(x))
        if self.mode in ("full", "gt_only"):
            A = adjacency if adjacency is not None else build_adjacency(x.shape[-2], self.tau, x.dtype)
            branches.append(self.gt_layer(x, A))
        h = torch.cat(branches, dim=-1) if len(branches) > 1 else branches[0]
        return self.fusion2(self.dropout(act(self.fusion1(self.dropout(h)))))

    def forward(self, x: torch.Tensor, adjacency: torch.Tensor | None = None):
        """Return ``(scores, alignment)``, each shaped like ``x`` minus the feature axis."""
        feats = self.features(x, adjacency)
        scores = score_head(self.classifier(feats)).squeeze(-1)
        return scores, alignment_scores(feats, self.class_embeddings[ANOMALY])


def sens_forward(model: SensitivityModel, x: torch.Tensor):
    return model(x)


def variant_forward(model: SensitivityModel, x: torch.Tensor, mode: str):
    """Scores of a sensitivity model under a branch configuration.

    Single-branch variants have a narrower fusion input, so ``mode`` must
    match the mode the model was built (and trained) with.
    """
    if mode not in MODES:
        raise InvalidParameterError(f"unknown sensitivity mode {mode!r}")
    if mode != model.mode:
        raise InvalidParameterError(f"model was built for mode {model.mode!r}, not {mode!r}")
    return model(x)[0]
