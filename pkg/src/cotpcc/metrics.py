"""Evaluation metrics: Chamfer distance, normals, point-to-plane PSNR, Bpp."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud

PSNR_CAP_DB = 100.0
DEFAULT_NORMAL_K = 16

__all__ = [
    "MetricReport",
    "chamfer_l2",
    "estimate_normals",
    "psnr_point_to_plane",
    "compute_bpp",
]


@dataclass
class MetricReport:
    """One evaluation row for a single compressed cloud."""

    cd: float
    psnr_db: float
    bpp: float
    n_source_points: int
    payload_bits: int
    header_bits: int

    def csv_row(self, model: str, lam: float) -> str:
        # cd is reported in units of 1e-3
        return f"{model},{lam:.6g},{self.bpp:.6g},{self.cd * 1e3:.6g},{self.psnr_db:.6g}"


def _pts(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def chamfer_l2(a, b) -> float:
    """Symmetric L2 Chamfer distance: sum of the two directed mean
    squared nearest-neighbor distances."""
    pa, pb = _pts(a), _pts(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("chamfer_l2 requires non-empty clouds")
    ta, tb = cKDTree(pa), cKDTree(pb)
    d_ab, _ = tb.query(pa, k=1)
    d_ba, _ = ta.query(pb, k=1)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def estimate_normals(cloud, k: int = DEFAULT_NORMAL_K, return_flags: bool = False):
    """Per-point unit normals from PCA over the k nearest neighbors.

    Degenerate neighborhoods (covariance rank < 2) fall back to +z and are
    flagged when return_flags is set. Sign is unoriented.
    """
    pts = _pts(cloud)
    n = pts.shape[0]
    if not 3 <= k < n:
        raise ValueError(f"require N > k >= 3, got N={n}, k={k}")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    neigh = pts[idx]  # (n, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    vals, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0].copy()  # eigenvector of the smallest eigenvalue
    degenerate = vals[:, 1] <= 1e-12 * np.maximum(vals[:, 2], 1e-300)
    normals[degenerate] = (0.0, 0.0, 1.0)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals /= norms
    if return_flags:
        return normals, degenerate
    return normals


def psnr_point_to_plane(ref, rec, k: int = DEFAULT_NORMAL_K) -> float:
    """Point-to-plane PSNR in dB, peak = reference bounding-box diagonal."""
    pr, pc = _pts(ref), _pts(rec)
    if pr.shape[0] == 0 or pc.shape[0] == 0:
        raise ValueError("psnr_point_to_plane requires non-empty clouds")
    normals = estimate_normals(pr, k=k)
    tree_ref = cKDTree(pr)
    tree_rec = cKDTree(pc)
    _, nn_fwd = tree_rec.query(pr, k=1)
    err_fwd = np.einsum("ij,ij->i", pr - pc[nn_fwd], normals)
    _, nn_bwd = tree_ref.query(pc, k=1)
    err_bwd = np.einsum("ij,ij->i", pc - pr[nn_bwd], normals[nn_bwd])
    mse = 0.5 * (np.mean(err_fwd**2) + np.mean(err_bwd**2))
    peak2 = float(((pr.max(axis=0) - pr.min(axis=0)) ** 2).sum())
    if mse <= 0.0 or peak2 == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak2 / mse))


def compute_bpp(bitstream, n_source_points: int) -> float:
    """Payload bits per source point (header excluded)."""
    if n_source_points < 1:
        raise ValueError("n_source_points must be >= 1")
    return bitstream.payload_bits / n_source_points
