"""Objective terms: Chamfer cost, critic gap, the transport-anchored
regularizer, and the assembled generator/critic objectives."""

import json
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from cotpcc.codec import EntropyModels
from cotpcc.entropy import QuantizerConfig
from cotpcc.losses import (
    LossBreakdown,
    LossWeights,
    chamfer_torch,
    cost_c,
    discriminator_objective,
    generator_objective,
    ot_loss,
    ot_regularizer,
    wasserstein_quadratic,
)
from cotpcc.nets import Decoder, Discriminator, Encoder, NetConfig

torch.set_num_threads(1)

TINY = NetConfig(k_nn=4, latent_dim=4, width=8, disc_width=8, decoder_width=8, sig_dim=32)


def _cloud(n, seed=0, dtype=torch.float32):
    rng = np.random.default_rng(seed)
    return torch.tensor(rng.uniform(-1, 1, (n, 3)), dtype=dtype)


class LinearCritic(nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = nn.Parameter(torch.as_tensor(w))

    def forward(self, x):
        return (x @ self.w).sum()


class ConstantCritic(nn.Module):
    def __init__(self, value=0.0):
        super().__init__()
        self.bias = nn.Parameter(torch.tensor(float(value)))

    def forward(self, x):
        return self.bias + 0.0 * x.sum()


# ---------------------------------------------------------------------------
# Weights and breakdown


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert w.beta == 100.0 and w.gamma == 0.001 and w.lam == 0.0
    with pytest.raises(ValueError):
        LossWeights(beta=-1)
    with pytest.raises(ValueError):
        LossWeights(gamma=-0.1)
    with pytest.raises(ValueError):
        LossWeights(lam=-0.5)
    LossWeights(beta=0.0, gamma=0.0)  # degenerate weights are allowed


def test_breakdown_json_line_and_finiteness():
    bd = LossBreakdown(1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    row = json.loads(bd.json_line(7))
    assert row["step"] == 7 and row["cost_c"] == 1.0 and row["rate_bpp"] == 4.0
    assert bd.is_finite()
    assert not LossBreakdown(math.nan, 0, 0, 0, 0, 0).is_finite()


# ---------------------------------------------------------------------------
# Chamfer cost


def test_cost_identity_zero():
    x = _cloud(20)
    assert cost_c([x], [x.clone()]).item() == 0.0


def test_cost_mean_of_examples():
    a1 = torch.tensor([[0.0, 0, 0]])
    b1 = torch.tensor([[1.0, 0, 0]])
    a2 = torch.tensor([[0.0, 0, 0], [2.0, 0, 0]])
    b2 = torch.tensor([[1.0, 0, 0]])
    got = cost_c([a1, a2], [b1, b2]).item()
    assert got == pytest.approx((2.0 + 2.0) / 2)


def test_cost_batch_mismatch():
    with pytest.raises(ValueError):
        cost_c([_cloud(4)], [_cloud(4), _cloud(4)])


def test_chamfer_torch_matches_metric():
    from cotpcc.metrics import chamfer_l2

    a, b = _cloud(40, 1, torch.float64), _cloud(30, 2, torch.float64)
    assert chamfer_torch(a, b).item() == pytest.approx(
        chamfer_l2(a.numpy(), b.numpy()), rel=1e-9
    )


def test_chamfer_gradient_finite_differences():
    torch.manual_seed(0)
    x = _cloud(16, 3, torch.float64)
    xh = _cloud(16, 4, torch.float64).requires_grad_(True)
    loss = chamfer_torch(x, xh)
    (grad,) = torch.autograd.grad(loss, xh)
    eps = 1e-6
    good = total = 0
    for i in range(16):
        for a in range(3):
            with torch.no_grad():
                orig = xh[i, a].item()
                xh[i, a] = orig + eps
                up = chamfer_torch(x, xh).item()
                xh[i, a] = orig - eps
                dn = chamfer_torch(x, xh).item()
                xh[i, a] = orig
            fd = (up - dn) / (2 * eps)
            an = grad[i, a].item()
            denom = max(abs(fd), abs(an), 1e-8)
            total += 1
            if abs(fd - an) / denom <= 1e-4:
                good += 1
    assert good >= math.ceil(0.95 * total)


# ---------------------------------------------------------------------------
# Critic gap


def test_wasserstein_constant_critic_zero():
    assert wasserstein_quadratic(torch.tensor([3.0, 3.0]), torch.tensor([3.0, 3.0])).item() == 0.0


def test_wasserstein_single_pair():
    assert wasserstein_quadratic(torch.tensor(3.0), torch.tensor(1.0)).item() == pytest.approx(4.0)


def test_wasserstein_two_pairs():
    jx = torch.tensor([2.0, 1.0])
    jxh = torch.tensor([0.0, 1.0])
    assert wasserstein_quadratic(jx, jxh).item() == pytest.approx(2.0)


def test_wasserstein_shape_mismatch():
    with pytest.raises(ValueError):
        wasserstein_quadratic(torch.zeros(2), torch.zeros(3))


# ---------------------------------------------------------------------------
# Transport-anchored regularizer


def test_otr_exact_match_zero():
    # critic with gradient norm exactly equal to the chamfer cost:
    # identical clouds give c=0; a constant critic gives ||grad||=0
    x = _cloud(12)
    assert ot_regularizer([x], [x.clone()], ConstantCritic()).item() == pytest.approx(0.0)


def test_otr_linear_critic_closed_form():
    # J(x) = sum_p w.x_p: per-point gradient w, ||g|| = sqrt(N)||w||;
    # with c = 0 the penalty is N ||w||^2
    n = 24
    w = torch.tensor([0.3, -0.2, 0.5], dtype=torch.float64)
    critic = LinearCritic(w).double()
    x = _cloud(n, 5, torch.float64)
    got = ot_regularizer([x], [x.clone()], critic).item()
    assert got == pytest.approx(n * (w @ w).item(), rel=1e-9)


def test_otr_zero_network():
    torch.manual_seed(0)
    d = Discriminator(TINY)
    d.zero_head()
    x = _cloud(16)
    assert ot_regularizer([x], [x.clone()], d).item() == 0.0


def test_otr_gradient_reaches_critic_only():
    torch.manual_seed(0)
    d = Discriminator(TINY)
    x = _cloud(16, 6)
    xh = _cloud(16, 7).requires_grad_(True)
    val = ot_regularizer([x], [xh], d, create_graph=True)
    val.backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in d.parameters())
    # the chamfer anchor is a constant: no gradient flows to reconstructions
    assert xh.grad is None or xh.grad.abs().sum() == 0


# ---------------------------------------------------------------------------
# Combined transport loss


def test_ot_loss_arithmetic_402_001():
    c = torch.tensor(2.0)
    dw = torch.tensor(4.0)
    lotr = torch.tensor(1.0)
    w = LossWeights()
    total = c + w.beta * dw + w.gamma * lotr
    assert total.item() == pytest.approx(402.001)


def test_ot_loss_perfect_reconstruction():
    x = _cloud(16)
    total, (c, dw, lotr) = ot_loss([x], [x.clone()], ConstantCritic(5.0), LossWeights())
    assert total.item() == pytest.approx(0.0)
    assert c.item() == 0.0 and dw.item() == 0.0 and lotr.item() == 0.0


def test_ot_loss_degenerate_weights_reduce_to_chamfer():
    torch.manual_seed(0)
    d = Discriminator(TINY)
    x, xh = _cloud(16, 8), _cloud(16, 9)
    total, (c, _, _) = ot_loss([x], [xh], d, LossWeights(beta=0.0, gamma=0.0))
    assert total.item() == pytest.approx(c.item())
    assert c.item() == pytest.approx(chamfer_torch(x, xh).item())


# ---------------------------------------------------------------------------
# Generator objective


def _gen_parts(dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    enc = Encoder(TINY)
    dec = Decoder(TINY)
    disc = Discriminator(TINY)
    models = EntropyModels(TINY.latent_dim)
    if dtype is torch.float64:
        enc.double(), dec.double(), disc.double(), models.double()
    return enc, dec, disc, models


def _gen_value(x, parts, weights, seed=3, noise_seed=5):
    enc, dec, disc, models = parts
    g = torch.Generator().manual_seed(noise_seed)
    total, bd, xhats = generator_objective(
        [x], enc, dec, disc, models, QuantizerConfig(), weights, (0.5, 0.5, 0.5),
        seed=seed, noise_gen=g,
    )
    return total, bd, xhats


def test_generator_lambda_zero_matches_weighted_terms():
    x = _cloud(32, 10)
    parts = _gen_parts()
    w = LossWeights(lam=0.0)
    total, bd, _ = _gen_value(x, parts, w)
    assert total.item() == pytest.approx(
        bd.cost_c + w.beta * bd.d_wass + w.gamma * bd.l_otr, rel=1e-5
    )
    assert bd.total_gen == pytest.approx(total.item(), rel=1e-5)


def test_generator_lambda_strictly_increases_objective():
    x = _cloud(32, 11)
    parts = _gen_parts()
    t0, bd0, _ = _gen_value(x, parts, LossWeights(lam=0.0))
    t1, bd1, _ = _gen_value(x, parts, LossWeights(lam=0.5))
    assert bd0.rate_bits > 0
    assert bd1.rate_bits == pytest.approx(bd0.rate_bits, rel=1e-6)
    assert t1.item() > t0.item()
    assert t1.item() == pytest.approx(t0.item() + 0.5 * bd0.rate_bits, rel=1e-5)


def test_generator_deterministic_given_seeds():
    x = _cloud(32, 12)
    parts = _gen_parts()
    _, bd_a, _ = _gen_value(x, parts, LossWeights())
    _, bd_b, _ = _gen_value(x, parts, LossWeights())
    assert bd_a == bd_b


def test_generator_dwass_has_no_entropy_model_gradient():
    # the reconstruction path divides by detached scales, so with lam=0 no
    # gradient reaches any entropy-model parameter
    x = _cloud(32, 13)
    enc, dec, disc, models = _gen_parts()
    total, _, _ = _gen_value(x, (enc, dec, disc, models), LossWeights(lam=0.0))
    total.backward()
    for p in models.parameters():
        assert p.grad is None or p.grad.abs().sum() == 0


def test_generator_rate_reaches_entropy_models():
    x = _cloud(32, 14)
    enc, dec, disc, models = _gen_parts()
    total, _, _ = _gen_value(x, (enc, dec, disc, models), LossWeights(lam=1.0))
    total.backward()
    grads = [p.grad.abs().sum().item() for p in models.parameters() if p.grad is not None]
    assert sum(grads) > 0


def test_generator_recon_only_skips_terms():
    x = _cloud(32, 15)
    enc, dec, disc, models = _gen_parts()
    g = torch.Generator().manual_seed(5)
    total, bd, xhats = generator_objective(
        [x], enc, dec, disc, models, QuantizerConfig(), LossWeights(), (0.5, 0.5, 0.5),
        seed=3, noise_gen=g, recon_only=True,
    )
    assert total is None and bd is None
    assert len(xhats) == 1 and xhats[0].shape == (32, 3)


def test_generator_full_pipeline_gradcheck():
    torch.manual_seed(0)
    x = _cloud(32, 16, torch.float64)
    parts = _gen_parts(torch.float64)
    enc, dec, disc, models = parts
    # gamma=0: the regularizer is constant w.r.t. generator parameters by
    # construction, but finite differences would still see its value move
    w = LossWeights(gamma=0.0, lam=0.05)

    def value():
        t, _, _ = _gen_value(x, parts, w)
        return t

    loss = value()
    gen_params = [p for p in (*enc.parameters(), *dec.parameters(), *models.parameters())]
    grads = torch.autograd.grad(loss, gen_params, allow_unused=True)
    flat = []
    for gi, (p, g) in enumerate(zip(gen_params, grads)):
        if g is None:
            continue
        for i in range(p.numel()):
            flat.append((gi, i))
    rng = np.random.default_rng(1)
    probes = rng.choice(len(flat), size=50, replace=False)
    eps = 1e-5
    good = 0
    for probe in probes:
        gi, i = flat[probe]
        p = gen_params[gi]
        with torch.no_grad():
            orig = p.view(-1)[i].item()
            p.view(-1)[i] = orig + eps
            up = value().item()
            p.view(-1)[i] = orig - eps
            dn = value().item()
            p.view(-1)[i] = orig
        fd = (up - dn) / (2 * eps)
        an = grads[gi].view(-1)[i].item()
        denom = max(abs(fd), abs(an), 1e-6)
        if abs(fd - an) / denom <= 1e-3:
            good += 1
    assert good >= 45  # >= 90% of 50 probes


# ---------------------------------------------------------------------------
# Critic objective


def test_disc_objective_zero_for_identical_inputs_gamma_zero():
    torch.manual_seed(0)
    d = Discriminator(TINY)
    x = _cloud(16, 17)
    obj = discriminator_objective([x], [x.clone()], d, LossWeights(gamma=0.0))
    obj.backward()
    assert obj.item() == 0.0
    for p in d.parameters():
        assert p.grad is None or p.grad.abs().max() == 0


def test_disc_objective_zero_head():
    torch.manual_seed(0)
    d = Discriminator(TINY)
    d.zero_head()
    x = _cloud(16, 18)
    # J == 0 and grad J == 0 everywhere; with a perfect reconstruction the
    # transport anchor is 0 too, so the whole objective vanishes
    assert discriminator_objective([x], [x.clone()], d, LossWeights()).item() == 0.0


def test_disc_ascent_step_non_decreasing():
    wins = 0
    for seed in range(10):
        torch.manual_seed(seed)
        d = Discriminator(TINY)
        x, xh = _cloud(24, seed), _cloud(24, seed + 100)
        w = LossWeights()
        obj = discriminator_objective([x], [xh], d, w)
        before = obj.item()
        grads = torch.autograd.grad(obj, list(d.parameters()))
        with torch.no_grad():
            for p, g in zip(d.parameters(), grads):
                p += 1e-4 * g
        after = discriminator_objective([x], [xh], d, w).item()
        if after >= before - 1e-12:
            wins += 1
    assert wins >= 8


def test_disc_objective_batch_mismatch():
    d = Discriminator(TINY)
    with pytest.raises(ValueError):
        discriminator_objective([_cloud(8)], [_cloud(8), _cloud(8)], d, LossWeights())
