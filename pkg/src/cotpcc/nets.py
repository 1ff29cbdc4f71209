"""Learnable networks: density-sensitive sampler, encoder, decoder, critic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import cloud as cloud_mod

SIG_DIM = 1024
MAX_CHILDREN = 4

__all__ = [
    "NetConfig",
    "LatentCode",
    "Sampler",
    "Encoder",
    "Decoder",
    "Discriminator",
    "significance_select",
    "knn_indices",
    "latent_size",
]


@dataclass
class NetConfig:
    k_nn: int = 16
    latent_dim: int = 8
    width: int = 32
    disc_width: int = 64
    decoder_width: int = 64
    sig_dim: int = SIG_DIM
    # saturating bound on the critic score: scores live in (-b, b), so the
    # squared score gap never exceeds (2b)^2 and the adversarial pressure on
    # the generator stays commensurate with the chamfer term. 0 disables.
    disc_bound: float = 0.015


@dataclass
class LatentCode:
    """Downsampled coordinates and per-point features, pre-quantization."""

    p3: torch.Tensor  # (m, 3)
    f3: torch.Tensor  # (m, d)
    stage_ratios: tuple[float, ...]

    @property
    def m(self) -> int:
        return self.p3.shape[0]


def latent_size(n: int, ratios) -> int:
    """Ceiling-product size law for staged downsampling."""
    m = n
    for r in ratios:
        m = math.ceil(m * r)
    return m


def knn_indices(points: torch.Tensor, queries: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k nearest points (in `points`) for each query row."""
    d = torch.cdist(queries, points)
    return d.topk(k, largest=False).indices  # (q, k)


class PointTransformerLayer(nn.Module):
    """Vector self-attention over k-NN neighborhoods."""

    def __init__(self, dim: int, k: int):
        super().__init__()
        self.k = k
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.pos_mlp = nn.Sequential(nn.Linear(3, dim), nn.ReLU(), nn.Linear(dim, dim))
        self.attn_mlp = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))

    def forward(self, x: torch.Tensor, points: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        q = self.to_q(x)  # (n, c)
        kf = self.to_k(x)[idx]  # (n, k, c)
        vf = self.to_v(x)[idx]
        rel = points[idx] - points.unsqueeze(1)  # (n, k, 3)
        pos = self.pos_mlp(rel)
        attn = self.attn_mlp(q.unsqueeze(1) - kf + pos)
        attn = torch.softmax(attn, dim=1)
        return (attn * (vf + pos)).sum(dim=1)


class EdgeConvLayer(nn.Module):
    """Max-pooled edge features from center⊕(neighbor−center) pairs."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.lin = nn.Linear(2 * in_dim, out_dim)

    def forward(self, x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        neigh = x[idx]  # (n, k, c)
        edge = torch.cat([x.unsqueeze(1).expand_as(neigh), neigh - x.unsqueeze(1)], dim=-1)
        return F.leaky_relu(self.lin(edge), 0.2).max(dim=1).values


class Sampler(nn.Module):
    """Per-point significance features: pointwise lift, point-transformer
    attention, three EdgeConv layers, and a projection into the 1024-dim
    significance space. One parameter set, shared by every encoder stage."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.lift = nn.Sequential(nn.Linear(3, w), nn.ReLU(), nn.Linear(w, w))
        self.transformer = PointTransformerLayer(w, cfg.k_nn)
        self.edges = nn.ModuleList([EdgeConvLayer(w, w) for _ in range(3)])
        self.sig_head = nn.Linear(w, cfg.sig_dim)

    def forward(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n = points.shape[0]
        if n < self.cfg.k_nn:
            raise ValueError(f"need at least k_nn={self.cfg.k_nn} points, got {n}")
        idx = knn_indices(points, points, self.cfg.k_nn)
        h = self.lift(points)
        h = h + self.transformer(h, points, idx)
        for edge in self.edges:
            h = edge(h, idx)
        # the argmax selection itself is not differentiable, but the
        # significance features stay in the graph: the encoder folds them
        # into its stage features, so the head learns which points carry
        # information and the selection tracks the trained features
        sig = self.sig_head(h)
        return sig, h

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _topk_membership(ft: np.ndarray, k: int) -> np.ndarray:
    """Rows belonging to any column's top-k, given the (columns, rows)
    transposed feature matrix. Value ties go to lower row indices."""
    n = ft.shape[1]
    if k >= n:
        return np.ones(n, dtype=bool)
    thresh = np.partition(ft, n - k, axis=1)[:, n - k]  # k-th largest per column
    above = ft > thresh[:, None]
    equal = ft == thresh[:, None]
    if int(equal.sum()) == ft.shape[0]:  # no value ties at the threshold
        member = above | equal
    else:
        quota = k - above.sum(axis=1)  # ties needed to fill each column's top-k
        tie_rank = np.cumsum(equal, axis=1)
        member = above | (equal & (tie_rank <= quota[:, None]))
    return member.any(axis=0)


def significance_select(features: np.ndarray, n: int, r: float, seed: int) -> np.ndarray:
    """Select ⌈nr⌉ rows by per-column feature significance.

    S1 holds the per-column argmax rows (ties to the lowest index). When S1
    already covers the quota a seeded uniform subset of it is returned;
    otherwise the per-column top-k pool Sk is grown until it does, always
    retaining all of S1.
    """
    features = np.asarray(features)
    if features.shape[0] != n:
        raise ValueError("features row count must equal n")
    if not 0 < r <= 1:
        raise ValueError("r must lie in (0, 1]")
    target = math.ceil(n * r)
    if target > n:
        raise ValueError(f"quota {target} exceeds available rows {n}")
    rng = np.random.default_rng(seed)
    ft = np.ascontiguousarray(features.T)
    s1 = np.unique(ft.argmax(axis=1))  # first max = lowest index
    if len(s1) >= target:
        return np.sort(rng.choice(s1, size=target, replace=False))
    k = math.ceil(target / len(s1))
    while True:
        sk = np.flatnonzero(_topk_membership(ft, k))
        if len(sk) >= target or k >= n:
            break
        k = min(n, 2 * k)
    extra_pool = np.setdiff1d(sk, s1)
    extra = rng.choice(extra_pool, size=target - len(s1), replace=False)
    return np.sort(np.concatenate([s1, extra]))


class Encoder(nn.Module):
    """Three downsampling stages sharing one Sampler; each stage selects
    points and aggregates neighborhood features with a shared learned map."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.sampler = Sampler(cfg)
        self.sig_red = nn.Linear(cfg.sig_dim, w)
        self.aggr = nn.Sequential(nn.Linear(w + 3, w), nn.ReLU(), nn.Linear(w, w))
        self.f_proj = nn.Linear(w, cfg.latent_dim)
        self.default_selector = "learned"

    def forward(
        self,
        points: torch.Tensor,
        ratios,
        seed: int = 0,
        selector: str | None = None,
    ) -> tuple[LatentCode, list[np.ndarray]]:
        if selector is None:
            selector = self.default_selector
        if selector not in ("learned", "fps"):
            raise ValueError(f"unknown selector {selector!r}")
        x = points
        feats = None
        all_idx = []
        for stage, r in enumerate(ratios):
            if not 0 < r <= 1:
                raise ValueError("all ratios must lie in (0, 1]")
            n_cur = x.shape[0]
            if n_cur < self.cfg.k_nn:
                raise ValueError(f"stage {stage}: {n_cur} points < k_nn={self.cfg.k_nn}")
            sig, hidden = self.sampler(x)
            # fold the significance features into the stage features so the
            # significance head trains end-to-end through the aggregation
            feats = (hidden if feats is None else feats) + self.sig_red(sig)
            if selector == "learned":
                idx = significance_select(
                    sig.detach().cpu().numpy(), n_cur, r, seed * 3 + stage
                )
            else:
                pc = cloud_mod.PointCloud(x.detach().cpu().numpy())
                idx = cloud_mod.fps(pc, math.ceil(n_cur * r), start_index=0)
            all_idx.append(idx)
            idx_t = torch.as_tensor(idx, dtype=torch.long, device=x.device)
            centers = x[idx_t]
            k = min(self.cfg.k_nn, n_cur)
            nn_idx = knn_indices(x, centers, k)
            offs = x[nn_idx] - centers.unsqueeze(1)
            edge = torch.cat([feats[nn_idx], offs], dim=-1)
            feats = self.aggr(edge).max(dim=1).values
            x = centers
        return LatentCode(p3=x, f3=self.f_proj(feats), stage_ratios=tuple(ratios)), all_idx


class Decoder(nn.Module):
    """Mirrors the encoder: three expansion stages that spawn ⌈1/r⌉ children
    per point via learned offsets, then a final pointwise refinement."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.decoder_width
        self.in_proj = nn.Linear(cfg.latent_dim, w)
        self.child_emb = nn.ParameterList(
            [nn.Parameter(torch.randn(MAX_CHILDREN, w) * 0.1) for _ in range(3)]
        )
        self.expand = nn.ModuleList(
            [
                nn.Sequential(nn.Linear(2 * w, w), nn.ReLU(), nn.Linear(w, 3 + w))
                for _ in range(3)
            ]
        )
        self.refine = nn.Sequential(nn.Linear(w, w), nn.ReLU(), nn.Linear(w, 3))

    def forward(self, latent: LatentCode, n_out: int) -> torch.Tensor:
        x = latent.p3
        h = self.in_proj(latent.f3)
        for stage, r in enumerate(reversed(latent.stage_ratios)):
            u = math.ceil(1.0 / r)
            if u > MAX_CHILDREN:
                raise ValueError(f"ratio {r} needs {u} children, max {MAX_CHILDREN}")
            m = x.shape[0]
            emb = self.child_emb[stage][:u]  # (u, w)
            inp = torch.cat(
                [h.unsqueeze(1).expand(m, u, h.shape[1]), emb.unsqueeze(0).expand(m, u, emb.shape[1])],
                dim=-1,
            )
            out = self.expand[stage](inp)  # (m, u, 3 + w)
            x = (x.unsqueeze(1) + out[..., :3]).reshape(-1, 3)
            h = out[..., 3:].reshape(-1, h.shape[1])
        x = x + self.refine(h)
        x = torch.clamp(x, -1.2, 1.2)
        size = x.shape[0]
        if size > n_out:
            x = x[:n_out]
        elif size < n_out:
            reps = [x]
            deficit = n_out - size
            while deficit > 0:
                take = min(deficit, size)
                reps.append(x[:take])
                deficit -= take
            x = torch.cat(reps, dim=0)
        return x

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class ResidualPointBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.lin1 = nn.Linear(dim, dim)
        self.lin2 = nn.Linear(dim, dim)

    def forward(self, x):
        return x + self.lin2(F.relu(self.lin1(x)))


class Discriminator(nn.Module):
    """Scalar critic: residual pointwise blocks, max⊕mean pooling, 2-layer head."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.disc_width
        self.lift = nn.Linear(3, w)
        self.blocks = nn.ModuleList([ResidualPointBlock(w) for _ in range(2)])
        self.head = nn.Sequential(nn.Linear(2 * w, w), nn.ReLU(), nn.Linear(w, 1))
        self.bound = cfg.disc_bound

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        if points.shape[0] == 0:
            raise ValueError("discriminator requires a non-empty cloud")
        h = F.relu(self.lift(points))
        for blk in self.blocks:
            h = blk(h)
        pooled = torch.cat([h.max(dim=0).values, h.mean(dim=0)])
        score = self.head(pooled).squeeze(-1)
        if self.bound > 0:
            score = self.bound * torch.tanh(score / self.bound)
        return score

    def zero_head(self):
        last = self.head[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
