"""Losses, per-stream training regimes, and the unified-training baseline."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .cons_stream import ConsistencyModel, eval_prior, gmp_loss, pool_gmp_params
from .datagen import FeatureSequence
from .nncore import (
    DEFAULT_TAU,
    GCNLayer,
    InvalidParameterError,
    Linear,
    alignment_scores,
    build_adjacency,
    make_generator,
    orthogonal_rows,
    score_head,
)
from .sens_stream import ANOMALY, SensitivityModel

BCE_EPS = 1e-7
DEFAULT_TOPK_RATIO = 1 / 16


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass
class TrainRegime:
    learning_rate: float
    steps: int = 200
    batch_size: int = 8
    topk_ratio: float = DEFAULT_TOPK_RATIO
    lambda_gmp: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise InvalidParameterError("learning_rate must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise InvalidParameterError("steps and batch_size must be positive")
        if not 0 < self.topk_ratio <= 1:
            raise InvalidParameterError("topk_ratio must lie in (0, 1]")
        if self.lambda_gmp < 0:
            raise InvalidParameterError("lambda_gmp must be non-negative")


def sens_regime(**overrides) -> TrainRegime:
    return TrainRegime(**{"learning_rate": 1e-3, **overrides})


def cons_regime(**overrides) -> TrainRegime:
    return TrainRegime(**{"learning_rate": 5e-5, "lambda_gmp": 0.7, "steps": 400, **overrides})


def unified_regime(**overrides) -> TrainRegime:
    return TrainRegime(**{"learning_rate": 1e-4, "lambda_gmp": 0.7, **overrides})


def topk_mean(scores: torch.Tensor, topk_ratio: float) -> torch.Tensor:
    T = scores.shape[-1]
    k = max(1, int(math.floor(topk_ratio * T)))
    return scores.topk(k, dim=-1).values.mean(dim=-1)


def _bce(p: torch.Tensor, y) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=p.dtype)
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def mil_loss(scores: torch.Tensor, video_label, topk_ratio: float = DEFAULT_TOPK_RATIO) -> torch.Tensor:
    """BCE between the top-k mean frame score and the video label."""
    return _bce(topk_mean(scores, topk_ratio), video_label)


def align_loss(align: torch.Tensor, video_label, topk_ratio: float = DEFAULT_TOPK_RATIO) -> torch.Tensor:
    return _bce(topk_mean(align, topk_ratio), video_label)


def total_loss_cons(l_mil, l_align, l_gmp, lam: float):
    return l_mil + l_align + lam * l_gmp


def sens_objective(model: SensitivityModel, x, y, regime: TrainRegime) -> dict:
    scores, align = model(x)
    l_mil = mil_loss(scores, y, regime.topk_ratio)
    l_align = align_loss(align, y, regime.topk_ratio)
    return {"loss": l_mil + l_align, "mil": l_mil, "align": l_align, "gmp": torch.zeros(())}


def cons_objective(model: ConsistencyModel, x, y, regime: TrainRegime) -> dict:
    out = model(x)
    l_mil = mil_loss(out["scores"], y, regime.topk_ratio)
    l_align = align_loss(out["align"], y, regime.topk_ratio)
    l_gmp = gmp_loss(out["scores"], out["G"])
    return {"loss": total_loss_cons(l_mil, l_align, l_gmp, regime.lambda_gmp),
            "mil": l_mil, "align": l_align, "gmp": l_gmp}


class BatchSampler:
    """Seeded class-balanced batches: half normal, half anomalous videos."""

    def __init__(self, data: Sequence[FeatureSequence], batch_size: int, seed: int):
        labels = np.array([s.video_label for s in data])
        self.pos = np.flatnonzero(labels == 1)
        self.neg = np.flatnonzero(labels == 0)
        if len(data) == 0 or self.pos.size == 0 or self.neg.size == 0:
            raise InvalidParameterError("training data must contain both normal and anomalous videos")
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.data = data
        self.uniform = len({s.features.shape for s in data}) == 1
        if self.uniform:
            self.x = torch.from_numpy(np.stack([s.features for s in data]))
            self.y = torch.from_numpy(labels.astype(np.float32))

    def next(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        n_pos = max(1, self.batch_size // 2)
        n_neg = max(1, self.batch_size - n_pos)
        idx = np.concatenate([self.rng.choice(self.pos, n_pos), self.rng.choice(self.neg, n_neg)])
        if self.uniform:
            return [(self.x[idx], self.y[idx])]
        return [(torch.from_numpy(self.data[i].features)[None],
                 torch.tensor([float(self.data[i].video_label)])) for i in idx]


def _make_optimizer(params, regime: TrainRegime):
    return torch.optim.Adam(params, lr=regime.learning_rate, betas=(regime.beta1, regime.beta2),
                            weight_decay=regime.weight_decay)


def _batch_objective(objective, model, chunks, regime) -> dict:
    """Average an objective over one or more equally weighted sub-batches."""
    total = None
    n = sum(x.shape[0] for x, _ in chunks)
    for x, y in chunks:
        part = objective(model, x.to(_dtype(model)), y.to(_dtype(model)), regime)
        w = x.shape[0] / n
        total = {k: v * w for k, v in part.items()} if total is None else {
            k: total[k] + v * w for k, v in part.items()}
    return total


def _dtype(model: nn.Module):
    return next(model.parameters()).dtype


def train_stream(model: nn.Module, data: Sequence[FeatureSequence], regime: TrainRegime,
                 mode: str) -> tuple[nn.Module, list[dict]]:
    """Fit one stream on its own objective with its own optimizer."""
    regime.validate()
    if mode == "sensitivity":
        objective = sens_objective
    elif mode == "consistency":
        objective = cons_objective
    else:
        raise InvalidParameterError(f"unknown training mode {mode!r}")
    torch.manual_seed(regime.seed)
    sampler = BatchSampler(data, regime.batch_size, regime.seed)
    opt = _make_optimizer(model.parameters(), regime)
    trace = []
    model.train()
    for step in range(regime.steps):
        parts = _batch_objective(objective, model, sampler.next(), regime)
        loss = parts["loss"]
        if not torch.isfinite(loss):
            raise TrainingError("non-finite loss", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        trace.append({"step": step, **{k: float(v.detach()) for k, v in parts.items()}})
    model.eval()
    return model, trace


class UnifiedModel(nn.Module):
    """Both streams merged into one network over a shared trunk.

    The trunk is the parallel TCN/graph-transformer extractor; the sensitivity
    head classifies trunk features directly, the consistency head passes them
    through graph convolutions and the mixture-prior module. The network's
    score is the mean of the two heads.
    """

    kind = "unified"

    def __init__(self, d: int, K: int = 5, seed: int = 0, tau: float = DEFAULT_TAU,
                 n_gcn_layers: int = 3):
        super().__init__()
        self.d, self.K, self.tau = d, K, tau
        self.trunk = SensitivityModel(d, "full", seed=seed, tau=tau)
        # the trunk's own classifier/class embeddings act as the sensitivity head
        g = make_generator(seed + 1)
        self.gcn_layers = nn.ModuleList(GCNLayer(d, d, g) for _ in range(n_gcn_layers))
        self.cons_classifier = Linear(d, 1, g)
        self.gmp_head = Linear(d, 3 * K, g)
        self.cons_class_embeddings = nn.Parameter(orthogonal_rows(2, d, g))

    def shared_parameters(self) -> list[nn.Parameter]:
        head = {id(p) for p in (*self.trunk.classifier.parameters(), self.trunk.class_embeddings)}
        return [p for p in self.trunk.parameters() if id(p) not in head]

    def heads(self, x: torch.Tensor) -> dict:
        feats = self.trunk.features(x)
        s_sens = score_head(self.trunk.classifier(feats)).squeeze(-1)
        a_sens = alignment_scores(feats, self.trunk.class_embeddings[ANOMALY])
        A = build_adjacency(x.shape[-2], self.tau, x.dtype)
        h = feats
        for layer in self.gcn_layers:
            h = layer(h, A)
        s_cons = score_head(self.cons_classifier(h)).squeeze(-1)
        a_cons = alignment_scores(h, self.cons_class_embeddings[ANOMALY])
        prior = pool_gmp_params(self.gmp_head(h), a_cons, x.shape[-2])
        return {"s_sens": s_sens, "a_sens": a_sens, "s_cons": s_cons, "a_cons": a_cons,
                "G": eval_prior(prior, x.shape[-2])}

    def forward(self, x):
        out = self.heads(x)
        return (out["s_sens"] + out["s_cons"]) / 2


def unified_objectives(model: UnifiedModel, x, y, regime: TrainRegime):
    out = model.heads(x)
    obj_sens = mil_loss(out["s_sens"], y, regime.topk_ratio) + align_loss(out["a_sens"], y, regime.topk_ratio)
    obj_cons = total_loss_cons(
        mil_loss(out["s_cons"], y, regime.topk_ratio),
        align_loss(out["a_cons"], y, regime.topk_ratio),
        gmp_loss(out["s_cons"], out["G"]),
        regime.lambda_gmp,
    )
    return obj_sens, obj_cons


@dataclass
class ConflictReport:
    cosines: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.cosines)) if self.cosines else float("nan")

    @property
    def fraction_negative(self) -> float:
        return float(np.mean(np.array(self.cosines) < 0)) if self.cosines else float("nan")


def gradient_cosine(ga: Sequence[Optional[torch.Tensor]], gb: Sequence[Optional[torch.Tensor]]) -> float:
    a = torch.cat([g.reshape(-1) for g in ga if g is not None] or [torch.zeros(1)]).double()
    b = torch.cat([g.reshape(-1) for g in gb if g is not None] or [torch.zeros(1)]).double()
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        return 0.0
    return float((a @ b / (na * nb)).clamp(-1.0, 1.0))


Objectives = Callable[[nn.Module, torch.Tensor, torch.Tensor, TrainRegime], tuple]


def train_unified(model: UnifiedModel, data: Sequence[FeatureSequence], regime: TrainRegime,
                  objectives: Objectives = unified_objectives):
    """Jointly optimize the summed objectives with one optimizer.

    Each step records the cosine between the two objectives' gradients over
    the shared trunk parameters. ``objectives`` is injectable for testing.
    """
    regime.validate()
    torch.manual_seed(regime.seed)
    sampler = BatchSampler(data, regime.batch_size, regime.seed)
    params = list(model.parameters())
    shared_ids = {id(p) for p in model.shared_parameters()}
    shared_idx = [i for i, p in enumerate(params) if id(p) in shared_ids]
    opt = _make_optimizer(params, regime)
    report = ConflictReport()
    trace = []
    model.train()
    for step in range(regime.steps):
        chunks = sampler.next()
        n = sum(x.shape[0] for x, _ in chunks)
        obj_a = obj_b = 0.0
        for x, y in chunks:
            a, b = objectives(model, x.to(_dtype(model)), y.to(_dtype(model)), regime)
            obj_a = obj_a + a * (x.shape[0] / n)
            obj_b = obj_b + b * (x.shape[0] / n)
        total = obj_a + obj_b
        if not torch.isfinite(total):
            raise TrainingError("non-finite loss", step)
        ga = torch.autograd.grad(obj_a, params, retain_graph=True, allow_unused=True)
        gb = torch.autograd.grad(obj_b, params, allow_unused=True)
        cos = gradient_cosine([ga[i] for i in shared_idx], [gb[i] for i in shared_idx])
        report.cosines.append(cos)
        opt.zero_grad(set_to_none=True)
        for p, a, b in zip(params, ga, gb):
            if a is None and b is None:
                continue
            p.grad = (a if a is not None else 0) + (b if b is not None else 0)
        opt.step()
        trace.append({"step": step, "loss_sens": float(obj_a.detach()), "loss_cons": float(obj_b.detach()),
                      "loss": float(total.detach()), "cosine": cos})
    model.eval()
    return model, report, trace


def write_trace_csv(path, trace: list[dict]) -> None:
    if not trace:
        raise ValueError("empty trace")
    cols = list(trace[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in trace:
            w.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c])) for c in cols])


def stream_gradient_error(kind: str, T: int = 16, D: int = 8, seed: int = 0, eps: float = 1e-4,
                          n_samples: int = 256, label: float = 1.0) -> float:
    """Max relative autograd-vs-central-difference error of a full stream loss
    at double precision on a random ``T x D`` input."""
    from .nncore import check_gradients

    g = torch.Generator().manual_seed(seed)
    x = torch.randn(T, D, generator=g, dtype=torch.float64)
    y = torch.tensor(label, dtype=torch.float64)
    if kind == "sens":
        model = SensitivityModel(D, seed=seed, t_max=T).double().eval()
        regime = sens_regime()

        def loss(m):
            return sens_objective(m, x, y, regime)["loss"]
    elif kind == "cons":
        model = ConsistencyModel(D, seed=seed, t_max=T).double().eval()
        regime = cons_regime()

        def loss(m):
            return cons_objective(m, x, y, regime)["loss"]
    else:
        raise InvalidParameterError(f"unknown stream {kind!r}")
    return check_gradients(model, loss, eps=eps, n_samples=n_samples, seed=seed)
