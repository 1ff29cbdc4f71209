"""Quantization, the learned factorized probability model, and rate estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PROB_FLOOR = 2.0**-16
COORD_STEP_DEFAULT = 2.0 / 1024.0
FEATURE_STEP_DEFAULT = 1.0

__all__ = [
    "QuantizerConfig",
    "FactorizedModel",
    "quantize",
    "dequantize",
    "noise_proxy",
    "rate_estimate",
    "PROB_FLOOR",
]


@dataclass
class QuantizerConfig:
    coord_step: float = COORD_STEP_DEFAULT
    feature_step: float = FEATURE_STEP_DEFAULT
    training_proxy: str = "uniform-noise"

    def __post_init__(self):
        if self.coord_step <= 0 or self.feature_step <= 0:
            raise ValueError("quantization steps must be > 0")
        if self.training_proxy != "uniform-noise":
            raise ValueError(f"unknown training proxy {self.training_proxy!r}")


def quantize(values, step: float):
    """Round values/step to integers, ties to even."""
    if step <= 0:
        raise ValueError("step must be > 0")
    if isinstance(values, torch.Tensor):
        return torch.round(values / step).to(torch.int64)
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize non-finite values")
    return np.rint(values / step).astype(np.int64)


def dequantize(q, step: float):
    if step <= 0:
        raise ValueError("step must be > 0")
    if isinstance(q, torch.Tensor):
        return q.to(torch.float64) * step
    return np.asarray(q, dtype=np.float64) * step


def noise_proxy(values: torch.Tensor, step: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Additive uniform noise in [-step/2, step/2]; training-time surrogate
    for hard rounding."""
    if step <= 0:
        raise ValueError("step must be > 0")
    u = torch.rand(values.shape, generator=generator, dtype=values.dtype, device=values.device)
    return values + (u - 0.5) * step


class FactorizedModel(nn.Module):
    """Per-channel monotone cumulative probability model.

    The cumulative function is a small stack of monotone affine layers with
    tanh gating, squashed by a sigmoid; integer-bin probabilities come from
    CDF differences at bin edges. One independent set of parameters per
    channel.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = np.log(np.expm1(1.0 / scale / dims[i + 1]))
            m = nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), float(init)))
            self._matrices.append(m)
            b = nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5))
            self._biases.append(b)
            if i < len(dims) - 2:
                self._factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def _logits_cdf(self, x: torch.Tensor) -> torch.Tensor:
        # x: (channels, n) -> logits of the CDF, same shape
        v = x.unsqueeze(1)  # (C, 1, n)
        for i, (m, b) in enumerate(zip(self._matrices, self._biases)):
            v = torch.bmm(F.softplus(m), v) + b
            if i < len(self._factors):
                v = v + torch.tanh(self._factors[i]) * torch.tanh(v)
        return v.squeeze(1)

    def bin_prob(self, x: torch.Tensor) -> torch.Tensor:
        """Probability mass of the unit-width bin centered on each value.

        x: (channels, n) in step units. Differentiable; floored at PROB_FLOOR.
        """
        if x.dim() != 2 or x.shape[0] != self.channels:
            raise ValueError(f"expected ({self.channels}, n) input, got {tuple(x.shape)}")
        upper = self._logits_cdf(x + 0.5)
        lower = self._logits_cdf(x - 0.5)
        # sigmoid difference in a numerically stable form
        sign = -torch.sign(upper + lower).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return torch.clamp(p, min=PROB_FLOOR)

    @torch.no_grad()
    def cdf_value(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self._logits_cdf(x))


def rate_estimate(z: torch.Tensor, model: FactorizedModel, step: float) -> torch.Tensor:
    """Total bits: -sum log2 P(bin) of z under the model, in units of step.

    z: (channels, n) continuous values (noise-proxied during training or
    dequantized at evaluation time).
    """
    if z.dim() != 2 or z.shape[0] != model.channels:
        raise ValueError(
            f"channel mismatch: model has {model.channels}, data is {tuple(z.shape)}"
        )
    p = model.bin_prob(z / step)
    return -torch.sum(torch.log2(p))
