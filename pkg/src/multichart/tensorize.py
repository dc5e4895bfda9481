"""Sampling toric charts on a regular grid and the stacked multi-chart tensor.

Grid node ``(i, j)`` of a ``k x k`` tensor is the torus point ``(u_i, u_j)``
with ``u_i = -1 + 2 i / (k - 1)``. With ``k`` odd and ``c = (k - 1) / 2`` the
landmark triplet of a chart sits on fixed nodes: the first landmark at
``(c, c)``, the second at ``(0, c)`` (and its periodic/rotated copies), the
third at ``(0, 0)`` (all four corners).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .flatten import FlatChart
from .mesh import Mesh

_MAGIC = b"MCT1"


class SamplingError(RuntimeError):
    pass


def check_resolution(k: int) -> int:
    k = int(k)
    if k < 3 or k % 2 == 0:
        raise ValueError(f"grid resolution must be odd and >= 3, got {k}")
    return k


def grid_nodes(k: int) -> np.ndarray:
    """Node coordinates ``u_i``; exact at -1, 0 and 1."""
    i = np.arange(k, dtype=np.float64)
    return (2.0 * i - (k - 1)) / (k - 1)


@lru_cache(maxsize=16)
def grid_orbits(k: int) -> np.ndarray:
    """Orbit label of every grid node under quarter turns and periodic wrap.

    The deck group of the four-copy cover acts on the torus by quarter turns
    about the origin; on the grid that is ``(i, j) -> (k-1-j, i)``. Boundary
    rows/columns ``0`` and ``k-1`` are the same torus points.
    Labels are the smallest flat index in each orbit.
    """
    check_resolution(k)
    n = k * k
    parent = np.arange(n)

    def root(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        rx, ry = root(x), root(y)
        if rx != ry:
            parent[max(rx, ry)] = min(rx, ry)

    for i in range(k):
        for j in range(k):
            union(i * k + j, (k - 1 - j) * k + i)
        union(i * k, i * k + k - 1)
        union(i, (k - 1) * k + i)
    labels = np.array([root(x) for x in range(n)])
    labels.setflags(write=False)
    return labels.reshape(k, k)


def anchor_nodes(k: int) -> dict:
    """Grid nodes holding each landmark of the triplet (every copy)."""
    c = (k - 1) // 2
    e = k - 1
    return {
        "center": [(c, c)],
        "edge": [(0, c), (e, c), (c, 0), (c, e)],
        "corner": [(0, 0), (0, e), (e, 0), (e, e)],
    }


@dataclass
class ChartTensor:
    """One chart sampled on the grid: ``grid[i, j]`` is a point of R^3."""

    grid: np.ndarray
    chart_id: int = 0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3 or self.grid.shape[0] != self.grid.shape[1] or self.grid.shape[2] != 3:
            raise ValueError(f"chart tensor must be k x k x 3, got {self.grid.shape}")
        check_resolution(self.grid.shape[0])
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("chart tensor has non-finite entries")

    @property
    def k(self) -> int:
        return self.grid.shape[0]


@dataclass
class MultiChartTensor:
    """Charts in triangulation face order, optionally with normalization records.

    ``data`` has shape ``(n_charts, k, k, 3)``. ``means`` (n_charts x 3) and
    ``norms`` (n_charts) are ``None`` for raw tensors.
    """

    data: np.ndarray
    means: np.ndarray | None = None
    norms: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[1] != self.data.shape[2] or self.data.shape[3] != 3:
            raise ValueError(f"multi-chart tensor must be n x k x k x 3, got {self.data.shape}")
        check_resolution(self.data.shape[1])
        if (self.means is None) != (self.norms is None):
            raise ValueError("normalization needs both means and norms")
        if self.means is not None:
            self.means = np.asarray(self.means, dtype=np.float64).reshape(self.n_charts, 3)
            self.norms = np.asarray(self.norms, dtype=np.float64).reshape(self.n_charts)

    @classmethod
    def from_charts(cls, charts) -> "MultiChartTensor":
        charts = list(charts)
        if len({c.k for c in charts}) > 1:
            raise ValueError("charts have different grid resolutions")
        return cls(np.stack([c.grid for c in charts]))

    @property
    def k(self) -> int:
        return self.data.shape[1]

    @property
    def n_charts(self) -> int:
        return self.data.shape[0]

    @property
    def normalized(self) -> bool:
        return self.means is not None

    def chart(self, p: int) -> ChartTensor:
        return ChartTensor(self.data[p], p)

    def stacked(self) -> np.ndarray:
        """The ``k x k x 3|F|`` channel-stacked view."""
        return np.concatenate(list(self.data), axis=2)

    def copy(self) -> "MultiChartTensor":
        return MultiChartTensor(self.data.copy(),
                                None if self.means is None else self.means.copy(),
                                None if self.norms is None else self.norms.copy())


@dataclass
class LandmarkTriplets:
    """``y[P]`` holds the 3 landmark points (rows) read from chart ``P``."""

    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim != 3 or self.y.shape[1:] != (3, 3):
            raise ValueError(f"landmark triplets must be n x 3 x 3, got {self.y.shape}")

    def __len__(self):
        return len(self.y)


# ---- sampling ----

def _candidates(corners: np.ndarray, k: int, shift: np.ndarray):
    h = 2.0 / (k - 1)
    c = corners + shift
    lo = (c.min(axis=1) + 1.0) / h
    hi = (c.max(axis=1) + 1.0) / h
    ilo = np.maximum(np.ceil(lo - 1e-9), 0).astype(np.int64)
    ihi = np.minimum(np.floor(hi + 1e-9), k - 1).astype(np.int64)
    ni = np.maximum(ihi[:, 0] - ilo[:, 0] + 1, 0)
    nj = np.maximum(ihi[:, 1] - ilo[:, 1] + 1, 0)
    counts = ni * nj
    face = np.repeat(np.arange(len(corners)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(counts.sum()) - start
    njr = np.repeat(nj, counts)
    ii = np.repeat(ilo[:, 0], counts) + local // np.maximum(njr, 1)
    jj = np.repeat(ilo[:, 1], counts) + local % np.maximum(njr, 1)
    return face, ii, jj


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def locate_grid(chart: FlatChart, k: int, tol: float = 1e-10):
    """Periodic point location of every grid node in the chart's cover faces.

    Returns ``(face, bary)`` with one containing cover face per node (row-major
    flat node order) and its barycentric coordinates. Among faces containing
    a node the one where it lies deepest inside wins; remaining ties go to
    the lowest face index and shift.
    """
    k = check_resolution(k)
    u = grid_nodes(k)
    corners = chart.corner_uv()
    n = k * k
    best_face = np.full(n, -1, dtype=np.int64)
    best_bary = np.zeros((n, 3))

    def run(shifts, todo):
        fs, ss, nodes, bs = [], [], [], []
        for si, s in enumerate(shifts):
            face, ii, jj = _candidates(corners, k, np.asarray(s, dtype=np.float64))
            node = ii * k + jj
            keep = todo[node]
            face, ii, jj, node = face[keep], ii[keep], jj[keep], node[keep]
            p = np.stack([u[ii], u[jj]], axis=1)
            c = corners[face] + np.asarray(s, dtype=np.float64)
            d = _cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
            lam = np.stack([
                _cross(c[:, 1] - p, c[:, 2] - p),
                _cross(c[:, 2] - p, c[:, 0] - p),
                _cross(c[:, 0] - p, c[:, 1] - p),
            ], axis=1) / d[:, None]
            inside = lam.min(axis=1) >= -tol
            fs.append(face[inside])
            ss.append(np.full(inside.sum(), si))
            nodes.append(node[inside])
            bs.append(lam[inside])
        face, shift, node, lam = map(np.concatenate, (fs, ss, nodes, bs))
        order = np.lexsort((shift, face, -lam.min(axis=1), node))
        node_sorted = node[order]
        first = np.flatnonzero(np.r_[True, node_sorted[1:] != node_sorted[:-1]]) if len(order) else order
        pick = order[first]
        best_face[node[pick]] = face[pick]
        bary = np.clip(lam[pick], 0.0, None)
        best_bary[node[pick]] = bary / bary.sum(axis=1, keepdims=True)

    near = [(a, b) for a in (0.0, -2.0, 2.0) for b in (0.0, -2.0, 2.0)]
    run(near, np.ones(n, dtype=bool))
    missing = best_face < 0
    if missing.any():
        far = [(a, b) for a in (-4.0, -2.0, 0.0, 2.0, 4.0) for b in (-4.0, -2.0, 0.0, 2.0, 4.0)
               if (a, b) not in near]
        run(far, missing)
    missing = np.flatnonzero(best_face < 0)
    if len(missing):
        raise SamplingError(f"{len(missing)} grid nodes not covered by any chart face "
                            f"(first: {np.unravel_index(missing[0], (k, k))}); chart is flipped or degenerate")
    return best_face, best_bary


def sample_chart(chart: FlatChart, k: int, m: Mesh | None = None, chart_id: int = 0) -> ChartTensor:
    """Sample surface coordinates on the ``k x k`` grid by barycentric interpolation.

    ``m`` overrides the chart's stored positions (same vertex count); anchor
    nodes receive the landmark positions exactly.
    """
    positions = chart.positions if m is None else m.vertices
    if len(positions) != chart.n_orig:
        raise ValueError("mesh does not match the chart's vertex count")
    face, bary = locate_grid(chart, k)
    corner_pos = positions[chart.cover_to_orig[chart.cover_faces[face]]]  # (n, 3, 3)
    grid = np.einsum("nc,ncx->nx", bary, corner_pos).reshape(k, k, 3)
    for name, idx in zip(("center", "edge", "corner"), chart.triplet):
        for i, j in anchor_nodes(k)[name]:
            grid[i, j] = positions[idx]
    return ChartTensor(grid, chart_id)


# ---- normalization ----

def normalize_chart(t: ChartTensor) -> tuple[ChartTensor, np.ndarray, float]:
    """Center each channel over the grid and scale the whole chart to unit Frobenius norm."""
    mean = t.grid.reshape(-1, 3).mean(axis=0)
    centered = t.grid - mean
    norm = float(np.linalg.norm(centered))
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError(f"chart {t.chart_id} is constant and cannot be normalized")
    return ChartTensor(centered / norm, t.chart_id), mean, norm


def denormalize_chart(t: ChartTensor, mean, norm: float) -> ChartTensor:
    return ChartTensor(t.grid * norm + np.asarray(mean), t.chart_id)


def normalize_tensor(mt: MultiChartTensor) -> MultiChartTensor:
    out, means, norms = [], [], []
    for p in range(mt.n_charts):
        t, mean, norm = normalize_chart(mt.chart(p))
        out.append(t.grid)
        means.append(mean)
        norms.append(norm)
    return MultiChartTensor(np.stack(out), np.array(means), np.array(norms))


def denormalize_tensor(mt: MultiChartTensor) -> MultiChartTensor:
    if not mt.normalized:
        return mt.copy()
    return MultiChartTensor(mt.data * mt.norms[:, None, None, None] + mt.means[:, None, None, :])


# ---- symmetry ----

def symmetry_project(t, mode: str = "average"):
    """Replace every grid node by the aggregate over its deck orbit.

    Accepts a ``ChartTensor``, a ``MultiChartTensor`` or a raw ``(..., k, k, C)``
    array. ``mode`` is ``"average"`` or ``"max"`` (per channel). The result is
    exactly orbit-invariant and a second application changes nothing.
    """
    if isinstance(t, ChartTensor):
        return ChartTensor(symmetry_project(t.grid, mode), t.chart_id)
    if isinstance(t, MultiChartTensor):
        return MultiChartTensor(symmetry_project(t.data, mode), t.means, t.norms)
    if mode not in ("average", "max"):
        raise ValueError(f"unknown symmetry mode {mode!r}")
    a = np.asarray(t, dtype=np.float64)
    k = a.shape[-2]
    labels = grid_orbits(k).ravel()
    flat = np.moveaxis(a.reshape(a.shape[:-3] + (k * k, a.shape[-1])), -2, 0)  # (k*k, ..., C)
    _, inv = np.unique(labels, return_inverse=True)
    n_orb = inv.max() + 1
    shape = (n_orb,) + flat.shape[1:]
    hi = np.full(shape, -np.inf)
    lo = np.full(shape, np.inf)
    np.maximum.at(hi, inv, flat)
    np.minimum.at(lo, inv, flat)
    if mode == "max":
        agg = hi
    else:
        sums = np.zeros(shape)
        np.add.at(sums, inv, flat)
        counts = np.bincount(inv).reshape((-1,) + (1,) * (flat.ndim - 1))
        agg = np.where(hi == lo, hi, sums / counts)
    out = agg[inv]
    return np.moveaxis(out, 0, -2).reshape(a.shape)


def orbit_deviation(t) -> float:
    """Largest spread (max - min) of any channel over any deck orbit."""
    a = t.grid if isinstance(t, ChartTensor) else (t.data if isinstance(t, MultiChartTensor) else np.asarray(t))
    return float(np.max(symmetry_project(a, "max") - (-symmetry_project(-a, "max"))))


# ---- landmarks ----

def extract_landmarks(mt: MultiChartTensor) -> LandmarkTriplets:
    """Read the center, edge-midpoint ``(0, c)`` and corner ``(0, 0)`` nodes of each chart."""
    c = (mt.k - 1) // 2
    d = mt.data
    return LandmarkTriplets(np.stack([d[:, c, c], d[:, 0, c], d[:, 0, 0]], axis=1))


def write_landmarks(mt: MultiChartTensor, y: LandmarkTriplets) -> MultiChartTensor:
    """Copy of ``mt`` with every anchor node (all copies) set from ``y``."""
    y = y.y if isinstance(y, LandmarkTriplets) else np.asarray(y)
    if y.shape != (mt.n_charts, 3, 3):
        raise ValueError(f"expected {mt.n_charts} x 3 x 3 triplets, got {y.shape}")
    out = mt.copy()
    for slot, name in enumerate(("center", "edge", "corner")):
        for i, j in anchor_nodes(mt.k)[name]:
            out.data[:, i, j] = y[:, slot]
    return out


# ---- file IO ----

def tensor_to_bytes(mt: MultiChartTensor) -> bytes:
    """``MCT1``, then <u4 k, n_charts, normalized flag; per-chart (<f8 mean x3, norm)
    records when normalized; chart arrays as row-major <f4."""
    parts = [_MAGIC, struct.pack("<3I", mt.k, mt.n_charts, 1 if mt.normalized else 0)]
    if mt.normalized:
        rec = np.concatenate([mt.means, mt.norms[:, None]], axis=1)
        parts.append(np.ascontiguousarray(rec, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(mt.data, dtype="<f4").tobytes())
    return b"".join(parts)


def tensor_from_bytes(data: bytes) -> MultiChartTensor:
    if data[:4] != _MAGIC:
        raise ValueError("not a multi-chart tensor file (bad magic)")
    k, n, flag = struct.unpack_from("<3I", data, 4)
    off = 16
    means = norms = None
    if flag:
        rec = np.frombuffer(data, dtype="<f8", count=4 * n, offset=off).reshape(n, 4)
        off += rec.nbytes
        means, norms = rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64)
    count = n * k * k * 3
    if len(data) - off != 4 * count:
        raise ValueError(f"tensor file size mismatch: expected {4 * count} data bytes, found {len(data) - off}")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(n, k, k, 3)
    return MultiChartTensor(arr.astype(np.float64), means, norms)


def save_tensor(mt: MultiChartTensor, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(mt))


def load_tensor(path) -> MultiChartTensor:
    return tensor_from_bytes(Path(path).read_bytes())


def dump_csv(mt: MultiChartTensor, directory, stem: str = "chart") -> list[Path]:
    """One CSV per chart with columns ``i, j, u, v, x, y, z``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    u = grid_nodes(mt.k)
    paths = []
    for p in range(mt.n_charts):
        path = directory / f"{stem}_{p:02d}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "u", "v", "x", "y", "z"])
            for i in range(mt.k):
                for j in range(mt.k):
                    x = mt.data[p, i, j]
                    w.writerow([i, j, repr(float(u[i])), repr(float(u[j])), *(repr(float(c)) for c in x)])
        paths.append(path)
    return paths
