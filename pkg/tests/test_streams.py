import json
import math
from pathlib import Path

import pytest
import torch

from decoupled_vad import nncore
from decoupled_vad.cons_stream import (
    ConsistencyModel,
    GaussianMixturePrior,
    NumericError,
    eval_prior,
    gmp_loss,
    pool_gmp_params,
)
from decoupled_vad.nncore import CapacityError, InvalidParameterError, SCORE_EPS, build_adjacency
from decoupled_vad.sens_stream import SensitivityModel, variant_forward

GOLDEN = json.loads((Path(__file__).parent / "data" / "golden_scores.json").read_text())
TINY = torch.linspace(-1, 1, 32, dtype=torch.float64).reshape(8, 4).float()


def test_sens_shapes_and_range():
    m = SensitivityModel(8, seed=1).eval()
    x = torch.randn(3, 40, 8)
    s, a = m(x)
    assert s.shape == a.shape == (3, 40)
    assert ((s > 0) & (s < 1)).all() and ((a >= 0) & (a <= 1)).all()
    assert m(x[0])[0].shape == (40,)


def test_sens_zero_params_give_sigmoid_of_bias():
    m = SensitivityModel(8, seed=1).eval()
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        m.classifier.bias.fill_(0.3)
    s, _ = m(torch.randn(12, 8))
    assert torch.allclose(s, torch.full((12,), 1 / (1 + math.exp(-0.3))), atol=2 * SCORE_EPS)


def test_sens_golden():
    with torch.no_grad():
        s = SensitivityModel(4, seed=0).eval()(TINY)[0]
    assert torch.allclose(s.double(), torch.tensor(GOLDEN["sens"], dtype=torch.float64), atol=1e-6)


def test_capacity_error():
    m = SensitivityModel(4, t_max=16)
    with pytest.raises(CapacityError):
        m(torch.randn(17, 4))


def test_variant_modes():
    x = torch.randn(20, 8)
    full = SensitivityModel(8, seed=2).eval()
    assert torch.equal(variant_forward(full, x, "full"), full(x)[0])
    with pytest.raises(InvalidParameterError):
        variant_forward(full, x, "sideways")
    with pytest.raises(InvalidParameterError):
        variant_forward(full, x, "tcn_only")

    tcn = SensitivityModel(8, "tcn_only", seed=2).eval()
    before = variant_forward(tcn, x, "tcn_only")
    with torch.no_grad():
        for p in tcn.gt_layer.parameters():
            p.add_(torch.randn_like(p))
    assert torch.equal(variant_forward(tcn, x, "tcn_only"), before)


def test_gt_only_with_identity_adjacency_matches_direct_composition():
    m = SensitivityModel(8, "gt_only", seed=4).eval().double()
    x = torch.randn(10, 8, dtype=torch.float64)
    eye = torch.eye(10, dtype=torch.float64)
    got, _ = m(x, adjacency=eye)
    h = x + m.positional_embedding.table[:10]
    attn = h @ m.gt_layer.attn.Wv @ m.gt_layer.attn.Wo + m.gt_layer.attn.bo  # self-only attention
    h = h + attn
    h = h + m.gt_layer.ff2(nncore.act(m.gt_layer.ff1(h)))
    h = m.fusion2(nncore.act(m.fusion1(h)))
    ref = nncore.score_head(m.classifier(h)).squeeze(-1)
    assert torch.allclose(got, ref, atol=1e-12)


def test_cons_forward_shapes_and_golden():
    m = ConsistencyModel(4, seed=0).eval()
    with torch.no_grad():
        out = m(TINY)
    assert out["scores"].shape == out["G"].shape == (8,)
    assert out["prior"].pi.shape == (8, 5) and out["prior"].mu.shape == (5,)
    assert torch.allclose(out["scores"].double(), torch.tensor(GOLDEN["cons"], dtype=torch.float64), atol=1e-6)


def test_cons_zero_gmp_head():
    m = ConsistencyModel(8, K=3, seed=0).eval()
    with torch.no_grad():
        m.gmp_head.weight.zero_()
        m.gmp_head.bias.zero_()
        out = m(torch.randn(30, 8))
    p = out["prior"]
    assert torch.allclose(p.mu, torch.full((3,), 15.0))
    assert torch.allclose(p.sigma, torch.full((3,), 1.0 + 30 * math.log(2) / 4))
    assert torch.allclose(p.pi, torch.full((30, 3), 1 / 3))


def test_pool_examples():
    T, K = 6, 4
    p = pool_gmp_params(torch.zeros(T, 3 * K), torch.full((T,), 0.5), T)
    assert torch.allclose(p.pi, torch.full((T, K), 1 / K)) and torch.allclose(p.mu, torch.full((K,), T / 2))
    raw = torch.randn(T, 3)
    p = pool_gmp_params(raw, torch.rand(T), T)
    assert torch.equal(p.pi, torch.ones(T, 1))
    raw = torch.zeros(1, 6, dtype=torch.float64)
    raw[0, 2], raw[0, 5] = 2.0, 0.0
    p = pool_gmp_params(raw, torch.ones(1, dtype=torch.float64), 1)
    e2 = math.exp(2)
    assert torch.allclose(p.pi[0], torch.tensor([e2 / (e2 + 1), 1 / (e2 + 1)], dtype=torch.float64))
    assert abs(p.pi[0, 0].item() - 0.8808) < 1e-4
    with pytest.raises(NumericError):
        pool_gmp_params(torch.full((2, 3), float("nan")), torch.ones(2), 2)


def test_eval_prior_examples():
    one = lambda mu, sigma, T: GaussianMixturePrior(torch.tensor([mu], dtype=torch.float64),
                                                    torch.tensor([sigma], dtype=torch.float64),
                                                    torch.ones(T, 1, dtype=torch.float64))
    assert eval_prior(one(3.0, 2.0, 8), 8)[3].item() == 1.0
    G = eval_prior(one(3.0, 1.0, 8), 8)
    assert abs(G[4].item() - math.exp(-0.5)) < 1e-15
    assert abs(G[4].item() - 0.60653) < 1e-5


def test_gmp_loss_examples():
    G = torch.rand(10, dtype=torch.float64)
    assert gmp_loss(G, G).item() == 0.0
    assert gmp_loss(G + 1, G).item() == pytest.approx(1.0, abs=1e-15)
    S = torch.tensor([0.2, 0.8], dtype=torch.float64)
    assert gmp_loss(S, torch.tensor([0.0, 1.0], dtype=torch.float64)).item() == pytest.approx(0.04, abs=1e-15)
    with pytest.raises(ValueError):
        gmp_loss(torch.zeros(3), torch.zeros(4))


def test_adjacency_hook_default_is_exponential_decay():
    m = SensitivityModel(8, "gt_only", seed=0).eval()
    x = torch.randn(12, 8)
    assert torch.equal(m(x)[0], m(x, adjacency=build_adjacency(12, math.e))[0])
