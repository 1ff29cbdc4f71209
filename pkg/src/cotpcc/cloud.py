"""Point-cloud data model, file I/O, block partitioning and sampling."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PointCloud",
    "Block",
    "DatasetSpec",
    "CloudParseError",
    "DegenerateInputError",
    "load_cloud",
    "write_cloud",
    "scale_scene",
    "partition_blocks",
    "synth_dataset",
    "nonuniform_sample",
    "fps",
]


class CloudParseError(ValueError):
    """Raised when a cloud file cannot be parsed."""


class DegenerateInputError(ValueError):
    """Raised when an input cloud has no usable spatial extent."""


@dataclass
class PointCloud:
    """An ordered array of 3D points, optionally tagged with its origin."""

    points: np.ndarray
    source_id: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class Block:
    """One axis-aligned block of a scene, with its [-1, 1] normalization."""

    cloud: PointCloud
    origin: np.ndarray  # block corner in scaled-scene coordinates (meters)
    edge_length: float
    scale: float  # normalized = (p - offset) * scale
    offset: np.ndarray  # block center (meters)

    def denormalize(self) -> np.ndarray:
        return self.cloud.points / self.scale + self.offset


SHAPE_FAMILIES = ("sphere", "box", "torus", "ridged_plane")


@dataclass
class DatasetSpec:
    """Recipe for a reproducible synthetic block dataset."""

    source: str = "synthetic"
    block_edge: float = 2.0
    points_per_block: int = 1024
    nonuniformity: float = 0.0
    seed: int = 0
    n_blocks: int = 64
    shapes: tuple[str, ...] = SHAPE_FAMILIES

    def __post_init__(self):
        if self.source not in ("synthetic", "files"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.points_per_block < 8:
            raise ValueError("points_per_block must be >= 8")
        if not 0.0 <= self.nonuniformity <= 1.0:
            raise ValueError("nonuniformity must lie in [0, 1]")
        for s in self.shapes:
            if s not in SHAPE_FAMILIES:
                raise ValueError(f"unknown shape family {s!r}")


# ---------------------------------------------------------------------------
# File I/O


def load_cloud(path) -> PointCloud:
    path = str(path)
    with open(path, "rb") as f:
        head = f.read(4)
    if head[:3] == b"ply":
        return _load_ply(path)
    return _load_xyz(path)


def _load_xyz(path: str) -> PointCloud:
    rows = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 3:
                raise CloudParseError(f"{path}: line {lineno}: expected 3 coordinates")
            try:
                xyz = [float(p) for p in parts[:3]]
            except ValueError as e:
                raise CloudParseError(f"{path}: line {lineno}: {e}") from e
            if not all(math.isfinite(v) for v in xyz):
                raise CloudParseError(f"{path}: line {lineno}: non-finite coordinate")
            rows.append(xyz)
    if not rows:
        raise CloudParseError(f"{path}: no points found")
    return PointCloud(np.array(rows, dtype=np.float64), source_id=path)


_PLY_SIZES = {
    "char": ("b", 1), "int8": ("b", 1),
    "uchar": ("B", 1), "uint8": ("B", 1),
    "short": ("h", 2), "int16": ("h", 2),
    "ushort": ("H", 2), "uint16": ("H", 2),
    "int": ("i", 4), "int32": ("i", 4),
    "uint": ("I", 4), "uint32": ("I", 4),
    "float": ("f", 4), "float32": ("f", 4),
    "double": ("d", 8), "float64": ("d", 8),
}


def _load_ply(path: str) -> PointCloud:
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header")
    if end < 0:
        raise CloudParseError(f"{path}: malformed header: missing end_header")
    nl = data.find(b"\n", end)
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:]

    fmt = None
    n_vertex = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header_lines:
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise CloudParseError(f"{path}: list properties on vertices unsupported")
            props.append((parts[1], parts[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise CloudParseError(f"{path}: unsupported PLY format {fmt!r}")
    if n_vertex is None:
        raise CloudParseError(f"{path}: malformed header: no vertex element")
    names = [n for _, n in props]
    for ax in ("x", "y", "z"):
        if ax not in names:
            raise CloudParseError(f"{path}: malformed header: missing property {ax!r}")
    ix, iy, iz = names.index("x"), names.index("y"), names.index("z")

    if fmt == "ascii":
        lines = [ln for ln in body.decode("ascii", errors="replace").splitlines() if ln.strip()]
        if len(lines) < n_vertex:
            raise CloudParseError(f"{path}: truncated payload: {len(lines)} of {n_vertex} rows")
        pts = np.empty((n_vertex, 3), dtype=np.float64)
        for i in range(n_vertex):
            parts = lines[i].split()
            if len(parts) < len(props):
                raise CloudParseError(f"{path}: truncated payload at row {i}")
            try:
                pts[i] = (float(parts[ix]), float(parts[iy]), float(parts[iz]))
            except ValueError as e:
                raise CloudParseError(f"{path}: row {i}: {e}") from e
    else:
        codes = []
        for t, _ in props:
            if t not in _PLY_SIZES:
                raise CloudParseError(f"{path}: unsupported property type {t!r}")
            codes.append(_PLY_SIZES[t][0])
        rec = struct.Struct("<" + "".join(codes))
        need = rec.size * n_vertex
        if len(body) < need:
            raise CloudParseError(
                f"{path}: truncated payload: {len(body)} bytes, need {need}"
            )
        pts = np.empty((n_vertex, 3), dtype=np.float64)
        for i, row in enumerate(rec.iter_unpack(body[:need])):
            pts[i] = (row[ix], row[iy], row[iz])
    if not np.all(np.isfinite(pts)):
        bad = int(np.argwhere(~np.isfinite(pts).all(axis=1))[0, 0])
        raise CloudParseError(f"{path}: non-finite coordinate at vertex {bad}")
    return PointCloud(pts, source_id=path)


def write_cloud(cloud: PointCloud, path, binary: bool = False) -> None:
    """Write a cloud as .xyz (ASCII) or .ply (ASCII/binary, by extension)."""
    path = str(path)
    if path.endswith(".ply"):
        _write_ply(cloud, path, binary)
    else:
        with open(path, "w") as f:
            for x, y, z in cloud.points:
                f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def _write_ply(cloud: PointCloud, path: str, binary: bool) -> None:
    n = len(cloud)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        pts32 = cloud.points.astype("<f4")
        if binary:
            f.write(pts32.tobytes())
        else:
            for x, y, z in pts32:
                f.write(f"{x:.9g} {y:.9g} {z:.9g}\n".encode("ascii"))


# ---------------------------------------------------------------------------
# Scene partitioning


def scale_scene(scene: PointCloud, cube_edge: float) -> PointCloud:
    """Fit a scene into the cube [0, cube_edge]^3.

    Scenes already inside the cube pass through unchanged, so block
    denormalization can reproduce the original coordinates; anything else is
    translated to the origin and, if larger than the cube, uniformly scaled
    down to fit.
    """
    pts = scene.points
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = float((hi - lo).max())
    if span == 0.0:
        raise DegenerateInputError("scene has zero extent on all axes")
    if (lo >= 0.0).all() and (hi <= cube_edge).all():
        return PointCloud(pts.copy(), source_id=scene.source_id)
    factor = cube_edge / span if span > cube_edge else 1.0
    return PointCloud((pts - lo) * factor, source_id=scene.source_id)


def partition_blocks(scene: PointCloud, cube_edge: float, block_edge: float) -> list[Block]:
    """Scale a scene into a cube and split it into occupied [-1,1] blocks."""
    if not cube_edge > block_edge > 0:
        raise ValueError("require cube_edge > block_edge > 0")
    scaled = scale_scene(scene, cube_edge)
    pts = scaled.points
    n_cells = int(math.ceil(cube_edge / block_edge))
    idx = np.floor(pts / block_edge).astype(np.int64)
    np.clip(idx, 0, n_cells - 1, out=idx)

    blocks = []
    scale = 2.0 / block_edge
    # stable grouping: lexicographic cell order, original point order within a cell
    keys = (idx[:, 0] * n_cells + idx[:, 1]) * n_cells + idx[:, 2]
    order = np.argsort(keys, kind="stable")
    boundaries = np.flatnonzero(np.diff(keys[order])) + 1
    for group in np.split(order, boundaries):
        cell = idx[group[0]]
        origin = cell.astype(np.float64) * block_edge
        center = origin + block_edge / 2.0
        local = (pts[group] - center) * scale
        blocks.append(
            Block(
                cloud=PointCloud(local, source_id=scene.source_id),
                origin=origin,
                edge_length=block_edge,
                scale=scale,
                offset=center,
            )
        )
    return blocks


# ---------------------------------------------------------------------------
# Synthetic data


def _surface_points(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "sphere":
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v
    if shape == "box":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        for i in range(n):
            a = axis[i]
            rest = [j for j in range(3) if j != a]
            pts[i, a] = sign[i]
            pts[i, rest[0]] = uv[i, 0]
            pts[i, rest[1]] = uv[i, 1]
        return pts
    if shape == "torus":
        big, small = 0.7, 0.3
        u = rng.uniform(0.0, 2 * np.pi, size=n)
        v = rng.uniform(0.0, 2 * np.pi, size=n)
        x = (big + small * np.cos(v)) * np.cos(u)
        y = (big + small * np.cos(v)) * np.sin(u)
        z = small * np.sin(v)
        return np.stack([x, y, z], axis=1)
    if shape == "ridged_plane":
        xy = rng.uniform(-1.0, 1.0, size=(n, 2))
        z = 0.25 * np.sin(2 * np.pi * xy[:, 0]) * np.cos(np.pi * xy[:, 1])
        return np.column_stack([xy, z])
    raise ValueError(f"unknown shape family {shape!r}")


def synth_dataset(spec: DatasetSpec) -> list[PointCloud]:
    """Generate deterministic clouds from parametric surfaces, in [-1,1]^3."""
    if spec.source != "synthetic":
        raise ValueError("synth_dataset requires a synthetic spec")
    clouds = []
    n = spec.points_per_block
    for i in range(spec.n_blocks):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        shape = spec.shapes[i % len(spec.shapes)]
        if spec.nonuniformity > 0.0:
            pool = _surface_points(shape, 4 * n, rng)
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            proj = pool @ axis
            lo, hi = proj.min(), proj.max()
            w = (proj - lo) / (hi - lo) if hi > lo else np.full(len(pool), 0.5)
            # cubic field sharpens the density contrast beyond the linear knob
            weight = (1.0 - spec.nonuniformity) + spec.nonuniformity * w**3
            keys = np.where(weight > 0, rng.exponential(size=len(pool)) / np.maximum(weight, 1e-300), np.inf)
            keep = np.sort(np.argsort(keys, kind="stable")[:n])
            pts = pool[keep]
        else:
            pts = _surface_points(shape, n, rng)
        clouds.append(PointCloud(pts, source_id=f"synthetic/{shape}/{i}"))
    return clouds


def nonuniform_sample(cloud: PointCloud, n: int, strength: float, seed: int) -> PointCloud:
    """Subsample n points with density biased along a seeded random axis."""
    big_n = len(cloud)
    if n > big_n:
        raise ValueError(f"cannot sample {n} points from {big_n}")
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    # orient the field to increase along the dominant data extent, so the
    # dense end is deterministic for a given cloud
    span = cloud.points.max(axis=0) - cloud.points.min(axis=0)
    if axis[int(np.argmax(span))] < 0:
        axis = -axis
    proj = cloud.points @ axis
    lo, hi = proj.min(), proj.max()
    w = (proj - lo) / (hi - lo) if hi > lo else np.full(big_n, 0.5)
    weight = (1.0 - strength) + strength * w
    keys = np.where(weight > 0, rng.exponential(size=big_n) / np.maximum(weight, 1e-300), np.inf)
    keep = np.sort(np.argsort(keys, kind="stable")[:n])
    return PointCloud(cloud.points[keep], source_id=cloud.source_id)


# ---------------------------------------------------------------------------
# Farthest point sampling


def fps(cloud: PointCloud, m: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest-point selection; ties broken by lowest index."""
    pts = cloud.points
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in [1, {n}], got {m}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index must lie in [0, {n}), got {start_index}")
    sel = np.empty(m, dtype=np.int64)
    sel[0] = start_index
    d2 = ((pts - pts[start_index]) ** 2).sum(axis=1)
    d2[start_index] = -np.inf
    for t in range(1, m):
        i = int(np.argmax(d2))  # first occurrence = lowest index on ties
        sel[t] = i
        nd = ((pts - pts[i]) ** 2).sum(axis=1)
        np.minimum(d2, nd, out=d2)
        d2[i] = -np.inf
    return sel
