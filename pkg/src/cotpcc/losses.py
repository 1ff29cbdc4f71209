"""Objective terms: Chamfer cost, adversarial Wasserstein estimate, the
transport-anchored critic regularizer, rate penalty, and the assembled
generator/critic objectives."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import torch

from .codec import EntropyModels
from .entropy import QuantizerConfig, rate_estimate
from .nets import LatentCode

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "chamfer_torch",
    "cost_c",
    "wasserstein_quadratic",
    "ot_regularizer",
    "ot_loss",
    "reconstruct_batch",
    "assemble_generator_objective",
    "generator_objective",
    "discriminator_objective",
]


@dataclass
class LossWeights:
    beta: float = 100.0
    gamma: float = 0.001
    lam: float = 0.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


@dataclass
class LossBreakdown:
    cost_c: float
    d_wass: float
    l_otr: float
    rate_bits: float  # bits per source point
    total_gen: float
    total_disc: float

    def json_line(self, step: int) -> str:
        row = {"step": step, "cost_c": self.cost_c, "d_wass": self.d_wass,
               "l_otr": self.l_otr, "rate_bpp": self.rate_bits,
               "total_gen": self.total_gen, "total_disc": self.total_disc}
        return json.dumps(row)

    def is_finite(self) -> bool:
        return all(
            torch.isfinite(torch.tensor(v)).item() for v in asdict(self).values()
        )


def _as_batch(x):
    if isinstance(x, torch.Tensor) and x.dim() == 3:
        return [x[i] for i in range(x.shape[0])]
    return list(x)


def chamfer_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable symmetric L2 Chamfer distance between (n,3) and (k,3)."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer requires non-empty clouds")
    d2 = torch.cdist(a, b) ** 2
    return d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()


def cost_c(x_batch, xhat_batch) -> torch.Tensor:
    """Batch-mean Chamfer distortion, differentiable w.r.t. reconstructions."""
    xs, xhs = _as_batch(x_batch), _as_batch(xhat_batch)
    if len(xs) != len(xhs):
        raise ValueError(f"batch mismatch: {len(xs)} vs {len(xhs)}")
    return torch.stack([chamfer_torch(x, xh) for x, xh in zip(xs, xhs)]).mean()


def wasserstein_quadratic(jx: torch.Tensor, jxhat: torch.Tensor) -> torch.Tensor:
    """Mean squared critic gap over paired clouds."""
    jx = torch.atleast_1d(jx)
    jxhat = torch.atleast_1d(jxhat)
    if jx.shape != jxhat.shape:
        raise ValueError(f"batch mismatch: {tuple(jx.shape)} vs {tuple(jxhat.shape)}")
    return ((jx - jxhat) ** 2).mean()


def ot_regularizer(x_batch, xhat_batch, critic, create_graph: bool = False) -> torch.Tensor:
    """Mean over the batch of (‖∇_x J(x)‖ − c(x, x̂))².

    The Chamfer cost enters as a constant; gradients reach only the critic.
    """
    xs, xhs = _as_batch(x_batch), _as_batch(xhat_batch)
    if len(xs) != len(xhs):
        raise ValueError(f"batch mismatch: {len(xs)} vs {len(xhs)}")
    terms = []
    for i, (x, xh) in enumerate(zip(xs, xhs)):
        xi = x.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            j = critic(xi)
            (g,) = torch.autograd.grad(j, xi, create_graph=create_graph)
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite critic gradient at sample {i}")
        gnorm = g.norm()
        with torch.no_grad():
            c = chamfer_torch(x, xh)
        terms.append((gnorm - c) ** 2)
    return torch.stack(terms).mean()


def ot_loss(x_batch, xhat_batch, critic, weights: LossWeights):
    """c + β·d_wass + γ·L_OTR with the per-term breakdown."""
    xs, xhs = _as_batch(x_batch), _as_batch(xhat_batch)
    c = cost_c(xs, xhs)
    jx = torch.stack([critic(x) for x in xs])
    jxh = torch.stack([critic(xh) for xh in xhs])
    dw = wasserstein_quadratic(jx, jxh)
    lotr = ot_regularizer(xs, xhs, critic)
    total = c + weights.beta * dw + weights.gamma * lotr
    return total, (c, dw, lotr)


def reconstruct_batch(
    x_batch,
    encoder,
    decoder,
    models: EntropyModels,
    qconfig: QuantizerConfig,
    ratios,
    seed: int = 0,
    noise_gen: torch.Generator | None = None,
    with_terms: bool = True,
):
    """Run the encode/quantize-proxy/decode pipeline over a batch.

    Returns (xhats, chamfers, per-point rates); the latter two are empty
    lists when ``with_terms`` is False. The rate term sees the learned
    feature scales; the reconstruction path must not, so the decoder input
    divides by detached scales.
    """
    xs = _as_batch(x_batch)
    scales = models.feature_scales
    xhats, cds, rates = [], [], []
    for x in xs:
        n = x.shape[0]
        # every cloud selects with the same seed so deployment-time coding
        # (which always selects with the caller's single seed) sees the same
        # subsets the decoder was trained on
        latent, _ = encoder(x, ratios, seed=seed)
        u_c = (torch.rand(latent.p3.shape, generator=noise_gen, dtype=latent.p3.dtype) - 0.5)
        noisy_p3 = latent.p3 + u_c * qconfig.coord_step
        scaled = latent.f3 * scales
        u_f = (torch.rand(scaled.shape, generator=noise_gen, dtype=scaled.dtype) - 0.5)
        noisy_scaled = scaled + u_f * qconfig.feature_step
        f_dec = latent.f3 + (u_f * qconfig.feature_step) / scales.detach()
        xhat = decoder(LatentCode(noisy_p3, f_dec, latent.stage_ratios), n)
        xhats.append(xhat)
        if not with_terms:
            continue
        rate = rate_estimate(noisy_p3.reshape(1, -1), models.coord, qconfig.coord_step)
        rate = rate + rate_estimate(noisy_scaled.t(), models.feat, qconfig.feature_step)
        cds.append(chamfer_torch(x, xhat))
        rates.append(rate / n)
    return xhats, cds, rates


def assemble_generator_objective(xs, xhats, cds, rates, critic, weights: LossWeights):
    """Combine pipeline terms with the critic gap into the generator loss."""
    c = torch.stack(cds).mean()
    dw = torch.stack(
        [(critic(x) - critic(xh)) ** 2 for x, xh in zip(xs, xhats)]
    ).mean()
    rate_bpp = torch.stack(rates).mean()
    with torch.no_grad():
        lotr = ot_regularizer(xs, xhats, critic)
    total = c + weights.beta * dw + weights.gamma * lotr + weights.lam * rate_bpp
    fc, fdw, flotr, frate = (t.detach().item() for t in (c, dw, lotr, rate_bpp))
    breakdown = LossBreakdown(
        cost_c=fc, d_wass=fdw, l_otr=flotr, rate_bits=frate,
        total_gen=fc + weights.beta * fdw + weights.gamma * flotr + weights.lam * frate,
        total_disc=weights.beta * fdw - weights.gamma * flotr,
    )
    return total, breakdown


def generator_objective(
    x_batch,
    encoder,
    decoder,
    critic,
    models: EntropyModels,
    qconfig: QuantizerConfig,
    weights: LossWeights,
    ratios,
    seed: int = 0,
    noise_gen: torch.Generator | None = None,
    recon_only: bool = False,
):
    """Full pipeline objective for the encoder/decoder/entropy-model side.

    Reconstructions go through the uniform-noise quantization proxy; the
    critic is evaluated but receives no parameter gradients from this value
    when only generator parameters are stepped. Returns (loss, breakdown,
    reconstructions); the first two are None when ``recon_only`` is set.
    """
    xs = _as_batch(x_batch)
    xhats, cds, rates = reconstruct_batch(
        xs, encoder, decoder, models, qconfig, ratios,
        seed=seed, noise_gen=noise_gen, with_terms=not recon_only,
    )
    if recon_only:
        return None, None, xhats
    total, breakdown = assemble_generator_objective(xs, xhats, cds, rates, critic, weights)
    return total, breakdown, xhats


def discriminator_objective(x_batch, xhat_batch, critic, weights: LossWeights) -> torch.Tensor:
    """Critic ascent target: β·d_wass − γ·L_OTR (maximize)."""
    xs, xhs = _as_batch(x_batch), _as_batch(xhat_batch)
    if len(xs) != len(xhs):
        raise ValueError(f"batch mismatch: {len(xs)} vs {len(xhs)}")
    jx = torch.stack([critic(x) for x in xs])
    jxh = torch.stack([critic(xh.detach()) for xh in xhs])
    dw = wasserstein_quadratic(jx, jxh)
    lotr = ot_regularizer(xs, xhs, critic, create_graph=True)
    return weights.beta * dw - weights.gamma * lotr
