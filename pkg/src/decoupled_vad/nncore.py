"""Differentiable building blocks shared by both scoring streams.

Everything here works on ``(T, D)`` or batched ``(B, T, D)`` tensors, with time
on the second-to-last axis. Gradients come from torch autograd; use
:func:`check_gradients` to verify any composition against central differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

# Module-wide nonlinearity (smooth, so finite-difference checks stay tight).
ACTIVATION = "gelu"

DEFAULT_TAU = math.e
ATTENTION_HEADS = 4
# scores are squashed into [SCORE_EPS, 1 - SCORE_EPS] so float32 never rounds them to 0 or 1
SCORE_EPS = 1e-6
# gradients below this are compared absolutely; central differences carry
# ~ulp(loss)/eps of rounding noise, which swamps any relative measure there
GRAD_FLOOR = 1e-6


class InvalidParameterError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class GradientCheckError(RuntimeError):
    pass


class CapacityError(ValueError):
    pass


def act(x: torch.Tensor) -> torch.Tensor:
    if ACTIVATION == "gelu":
        return F.gelu(x)
    if ACTIVATION == "linear":
        return x
    raise InvalidParameterError(f"unknown activation {ACTIVATION!r}")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int
    kernel_size: int = 3
    dilation: int = 1
    heads: int = ATTENTION_HEADS

    def __post_init__(self):
        if self.kind not in {"linear", "dilated_conv", "attention", "gcn", "positional_embedding"}:
            raise InvalidParameterError(f"unknown layer kind {self.kind!r}")
        if self.width <= 0:
            raise InvalidParameterError("width must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidParameterError("kernel_size must be a positive odd integer")
        if self.dilation < 1:
            raise InvalidParameterError("dilation must be >= 1")
        if self.heads < 1:
            raise InvalidParameterError("heads must be >= 1")


def build_adjacency(T: int, tau: float = DEFAULT_TAU, dtype=torch.float32) -> torch.Tensor:
    """``A[i, j] = exp(-|i - j| / tau)``."""
    if T < 1:
        raise InvalidParameterError(f"T must be >= 1, got {T}")
    if not tau > 0:
        raise InvalidParameterError(f"tau must be positive, got {tau}")
    idx = torch.arange(T, dtype=torch.float64)
    dist = (idx[:, None] - idx[None, :]).abs()
    # floor at the smallest normal so far-apart frames stay strictly connected
    return torch.exp(-dist / tau).to(dtype).clamp(min=torch.finfo(dtype).tiny)


def row_normalize(A: torch.Tensor) -> torch.Tensor:
    return A / A.sum(dim=-1, keepdim=True)


def glorot_(t: torch.Tensor, fan_in: int, fan_out: int, generator: torch.Generator) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=generator, dtype=torch.float64) * 2 * bound - bound)
    return t


def linear_forward(x: torch.Tensor, W: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} does not match weight rows {W.shape[0]}")
    out = x @ W
    if b is not None:
        if b.shape[-1] != W.shape[1]:
            raise DimensionError("bias width does not match weight columns")
        out = out + b
    return out


def dilated_conv_forward(
    x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None, dilation: int = 1
) -> torch.Tensor:
    """Same-length 1-D convolution over time.

    ``weight`` has shape ``(kernel_size, D_in, D_out)``; output ``t`` sums
    ``x[t + (j - k//2) * dilation] @ weight[j]`` over taps ``j``, with zeros
    outside the sequence.
    """
    if dilation < 1:
        raise InvalidParameterError(f"dilation must be >= 1, got {dilation}")
    k, d_in, d_out = weight.shape
    if k % 2 == 0:
        raise InvalidParameterError("kernel_size must be odd")
    if x.shape[-1] != d_in:
        raise DimensionError(f"input width {x.shape[-1]} does not match kernel input {d_in}")
    T = x.shape[-2]
    pad = (k - 1) // 2 * dilation
    xp = F.pad(x, (0, 0, pad, pad))
    # stack the shifted taps along features so the whole conv is one matmul
    taps = torch.cat([xp[..., j * dilation:j * dilation + T, :] for j in range(k)], dim=-1)
    out = taps @ weight.reshape(k * d_in, d_out)
    return out + bias if bias is not None else out


def attention_weights(q: torch.Tensor, k: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """Softmax attention gated elementwise by ``A`` and renormalized per row.

    Gating then renormalizing equals a softmax over ``logits + log A``, which
    is what is computed; zero entries of ``A`` become ``-inf`` logits.
    """
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(logits + torch.log(A), dim=-1)


def attention_forward(
    x: torch.Tensor,
    A: torch.Tensor,
    Wq: torch.Tensor,
    Wk: torch.Tensor,
    Wv: torch.Tensor,
    Wo: torch.Tensor,
    heads: int = ATTENTION_HEADS,
    bo: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    T, D = x.shape[-2], x.shape[-1]
    if A.shape[-2:] != (T, T):
        raise DimensionError(f"adjacency shape {tuple(A.shape)} does not match sequence length {T}")
    if D % heads:
        raise DimensionError(f"width {D} not divisible by {heads} heads")
    dh = D // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, dh).transpose(-2, -3)

    q, k, v = split(x @ Wq), split(x @ Wk), split(x @ Wv)
    w = attention_weights(q, k, A.to(x.dtype))
    ctx = (w @ v).transpose(-2, -3).reshape(*x.shape[:-1], D)
    return linear_forward(ctx, Wo, bo)


def gcn_forward(x: torch.Tensor, A: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    T = x.shape[-2]
    if A.shape[-2:] != (T, T):
        raise DimensionError(f"adjacency shape {tuple(A.shape)} does not match sequence length {T}")
    return act(time_mix(row_normalize(A.to(x.dtype)), x) @ W)


def time_mix(M: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """``M @ x`` along time for ``x`` of shape (T, D) or (B, T, D)."""
    if x.dim() == 2:
        return M @ x
    B, T, D = x.shape
    return (M @ x.transpose(0, 1).reshape(T, B * D)).reshape(T, B, D).transpose(0, 1)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, generator: torch.Generator, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(glorot_(torch.empty(d_in, d_out), d_in, d_out, generator))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear_forward(x, self.weight, self.bias)


class DilatedConv(nn.Module):
    def __init__(self, spec: LayerSpec, d_in: int, generator: torch.Generator):
        super().__init__()
        self.dilation = spec.dilation
        k = spec.kernel_size
        self.weight = nn.Parameter(glorot_(torch.empty(k, d_in, spec.width), k * d_in, k * spec.width, generator))
        self.bias = nn.Parameter(torch.zeros(spec.width))

    def forward(self, x):
        return dilated_conv_forward(x, self.weight, self.bias, self.dilation)


class ResidualConvBlock(nn.Module):
    """conv -> act -> conv, plus identity skip."""

    def __init__(self, d: int, dilation: int, generator: torch.Generator, kernel_size: int = 3):
        super().__init__()
        spec = LayerSpec("dilated_conv", d, kernel_size=kernel_size, dilation=dilation)
        self.conv1 = DilatedConv(spec, d, generator)
        self.conv2 = DilatedConv(spec, d, generator)

    def forward(self, x):
        return x + self.conv2(act(self.conv1(x)))


class TCN(nn.Module):
    def __init__(self, d: int, n_blocks: int, generator: torch.Generator, kernel_size: int = 3):
        super().__init__()
        self.blocks = nn.ModuleList(
            ResidualConvBlock(d, 2**level, generator, kernel_size) for level in range(n_blocks)
        )

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class AdjacencyAttention(nn.Module):
    def __init__(self, d: int, generator: torch.Generator, heads: int = ATTENTION_HEADS):
        super().__init__()
        if d % heads:
            raise InvalidParameterError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.Wq = nn.Parameter(glorot_(torch.empty(d, d), d, d, generator))
        self.Wk = nn.Parameter(glorot_(torch.empty(d, d), d, d, generator))
        self.Wv = nn.Parameter(glorot_(torch.empty(d, d), d, d, generator))
        self.Wo = nn.Parameter(glorot_(torch.empty(d, d), d, d, generator))
        self.bo = nn.Parameter(torch.zeros(d))

    def forward(self, x, A):
        return attention_forward(x, A, self.Wq, self.Wk, self.Wv, self.Wo, self.heads, self.bo)


class GraphTransformerLayer(nn.Module):
    """Adjacency-gated self-attention followed by a feed-forward block, both residual."""

    def __init__(self, d: int, generator: torch.Generator, heads: int = ATTENTION_HEADS):
        super().__init__()
        self.attn = AdjacencyAttention(d, generator, heads)
        self.ff1 = Linear(d, d, generator)
        self.ff2 = Linear(d, d, generator)

    def forward(self, x, A):
        x = x + self.attn(x, A)
        return x + self.ff2(act(self.ff1(x)))


class GCNLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, generator: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(glorot_(torch.empty(d_in, d_out), d_in, d_out, generator))

    def forward(self, x, A):
        return gcn_forward(x, A, self.weight)


class PositionalEmbedding(nn.Module):
    def __init__(self, t_max: int, d: int, generator: torch.Generator, scale: float = 0.02):
        super().__init__()
        self.t_max = t_max
        with torch.no_grad():
            table = torch.randn(t_max, d, generator=generator, dtype=torch.float64) * scale
        self.table = nn.Parameter(table.float())

    def forward(self, x):
        T = x.shape[-2]
        if T > self.t_max:
            raise CapacityError(f"sequence length {T} exceeds positional capacity {self.t_max}")
        return x + self.table[:T]


def score_head(logits: torch.Tensor) -> torch.Tensor:
    return SCORE_EPS + (1 - 2 * SCORE_EPS) * torch.sigmoid(logits)


def alignment_scores(x: torch.Tensor, anchor: torch.Tensor) -> torch.Tensor:
    """``(cos(x[t], anchor) + 1) / 2`` per frame."""
    cos = F.cosine_similarity(x, anchor.expand_as(x), dim=-1, eps=1e-8)
    return (cos + 1) / 2


def orthogonal_rows(n: int, d: int, generator: torch.Generator) -> torch.Tensor:
    g = torch.randn(d, max(n, 1), generator=generator, dtype=torch.float64)
    q, _ = torch.linalg.qr(g)
    return q[:, :n].T.contiguous().float()


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def check_gradients(
    model: nn.Module,
    loss_fn: Callable[[nn.Module], torch.Tensor],
    eps: float = 1e-4,
    n_samples: int = 64,
    seed: int = 0,
    params: Optional[Iterable[tuple[str, nn.Parameter]]] = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn(model)`` must be a deterministic scalar. Call on a model already
    cast to float64; a random subset of ``n_samples`` scalar parameter
    entries is probed (all entries if fewer exist).
    """
    named = list(params if params is not None else model.named_parameters())
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    if not torch.isfinite(loss):
        raise GradientCheckError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)

    sizes = [p.numel() for _, p in named]
    total = sum(sizes)
    rng = torch.Generator().manual_seed(seed)
    if total <= n_samples:
        picks = torch.arange(total)
    else:
        picks = torch.randperm(total, generator=rng)[:n_samples]
    offsets = torch.tensor([0] + sizes).cumsum(0)

    worst = 0.0
    with torch.no_grad():
        for flat in picks.tolist():
            which = int(torch.searchsorted(offsets, flat, right=True)) - 1
            local = flat - int(offsets[which])
            _, p = named[which]
            g = grads[which]
            analytic = 0.0 if g is None else float(g.reshape(-1)[local])
            view = p.data.view(-1)
            orig = view[local].item()
            view[local] = orig + eps
            f_plus = float(loss_fn(model))
            view[local] = orig - eps
            f_minus = float(loss_fn(model))
            view[local] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise GradientCheckError(f"non-finite loss while probing {named[which][0]}[{local}]")
            fd = (f_plus - f_minus) / (2 * eps)
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), GRAD_FLOOR)
            worst = max(worst, rel)
    return worst
