"""Surface reconstruction from a multi-chart tensor by template fitting.

A template mesh with the same landmark structure supplies, for every vertex
``v`` and chart ``P``, the torus point ``u_P(v)`` and a weight ``tau_P(v)``:
the vertex's area magnification in that chart (uv 1-ring area over surface
1-ring area). The new position of ``v`` is the ``tau``-weighted average of
the scaled charts evaluated at ``u_P(v)`` by periodic bilinear interpolation.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flatten import area_scale, chart_for, wrap_torus
from .graph import ChartTriangulation
from .mesh import LandmarkSet, Mesh, write_obj
from .recovery import STSolution, solve_st
from .tensorize import MultiChartTensor, extract_landmarks

MIN_UV_RING = 1e-12
CONSISTENCY_TOL = 1e-8


class ReconstructionError(RuntimeError):
    pass


@dataclass
class Template:
    """Template mesh with its charts, per-chart uv of each vertex and weights ``tau`` (n_charts x n)."""

    mesh: Mesh
    structure: ChartTriangulation
    landmarks: LandmarkSet
    charts: list
    uv: np.ndarray
    tau: np.ndarray

    @classmethod
    def from_charts(cls, m: Mesh, structure: ChartTriangulation, landmarks: LandmarkSet, charts) -> "Template":
        charts = list(charts)
        if len(charts) != structure.c:
            raise ValueError(f"need {structure.c} charts, got {len(charts)}")
        uv, tau = [], []
        for ch in charts:
            sf = area_scale(ch)
            uv.append(ch.uv[ch.representative()])
            tau.append(np.where(sf.uv_ring < MIN_UV_RING, 0.0, sf.values))
        tau = np.array(tau)
        if np.any(tau.sum(axis=0) <= 0):
            bad = np.flatnonzero(tau.sum(axis=0) <= 0)
            raise ReconstructionError(f"{len(bad)} template vertices are not covered by any chart: {bad[:10].tolist()}")
        return cls(m, structure, landmarks, charts, np.array(uv), tau)

    @classmethod
    def build(cls, m: Mesh, structure: ChartTriangulation, landmarks: LandmarkSet, jobs: int = 1,
              min_weight: float = 1e-3) -> "Template":
        landmarks.check(m)
        trips = [tuple(landmarks[i] for i in f) for f in structure.faces]
        if jobs > 1:
            with ThreadPoolExecutor(jobs) as ex:
                charts = list(ex.map(lambda t: chart_for(m, t, min_weight), trips))
        else:
            charts = [chart_for(m, t, min_weight) for t in trips]
        return cls.from_charts(m, structure, landmarks, charts)

    def weights(self) -> np.ndarray:
        """Normalized weights ``tau / sum_P tau``; columns sum to 1."""
        return self.tau / self.tau.sum(axis=0, keepdims=True)

    def dominant_chart(self) -> np.ndarray:
        return np.argmax(self.tau, axis=0)


@dataclass
class ReconstructedMesh:
    mesh: Mesh
    dominant_chart: np.ndarray


def recover_charts(q: MultiChartTensor, t: ChartTriangulation, p0: int = 0,
                   tol: float = CONSISTENCY_TOL) -> tuple[MultiChartTensor, STSolution]:
    """Scale and translate every chart into the common frame: ``a_P Q_P + b_P``.

    Refuses tensors whose landmark entries are not consistent (least-squares
    residual above ``tol``).
    """
    sol = solve_st(t, extract_landmarks(q), p0)
    if sol.residual > tol:
        raise ReconstructionError(f"tensor landmarks are not consistent (residual {sol.residual:.3e} > {tol:g}); "
                                  "run the landmark-consistency projection first")
    data = sol.a[:, None, None, None] * q.data + sol.b[:, None, None, :]
    return MultiChartTensor(data), sol


def bilinear_eval(grid: np.ndarray, u) -> np.ndarray:
    """Periodic bilinear interpolation of a ``k x k x C`` grid at torus points ``u`` (..., 2)."""
    grid = np.asarray(grid, dtype=np.float64)
    k = grid.shape[0]
    cells = k - 1
    u = wrap_torus(u)
    s = (u + 1.0) * (cells / 2.0)
    near = np.rint(s)
    s = np.where(np.abs(s - near) < 1e-12, near, s)
    base = np.floor(s)
    frac = s - base
    i0 = base.astype(np.int64) % cells
    i, j = i0[..., 0], i0[..., 1]
    fx, fy = frac[..., 0:1], frac[..., 1:2]
    g00, g10 = grid[i, j], grid[i + 1, j]
    g01, g11 = grid[i, j + 1], grid[i + 1, j + 1]
    return (1 - fx) * ((1 - fy) * g00 + fy * g01) + fx * ((1 - fy) * g10 + fy * g11)


def template_fit(q_hat: MultiChartTensor, tmpl: Template, pins: dict | None = None) -> ReconstructedMesh:
    """Weighted blend of the scaled charts at the template's uv coordinates.

    ``pins`` maps vertex indices to positions that override the blend
    (used for landmarks, whose values are known exactly).
    """
    if q_hat.n_charts != len(tmpl.charts):
        raise ValueError(f"tensor has {q_hat.n_charts} charts, template has {len(tmpl.charts)}")
    w = tmpl.weights()
    pos = np.zeros((tmpl.mesh.n_vertices, 3))
    for p in range(q_hat.n_charts):
        live = w[p] > 0
        pos[live] += w[p, live, None] * bilinear_eval(q_hat.data[p], tmpl.uv[p, live])
    for v, x in (pins or {}).items():
        pos[v] = x
    return ReconstructedMesh(tmpl.mesh.with_vertices(pos), tmpl.dominant_chart())


def landmark_pins(tmpl: Template, sol: STSolution) -> dict:
    return {int(v): sol.q[l] for l, v in enumerate(tmpl.landmarks.indices)}


def export_obj(r: ReconstructedMesh, path, chart_ids: bool = True) -> None:
    """Write the mesh; with ``chart_ids`` each vertex's dominant chart goes into a ``# chart`` comment."""
    comments = [f"reconstructed mesh: {r.mesh.n_vertices} vertices, {r.mesh.n_faces} faces"]
    if chart_ids:
        comments += [f"chart {v} {int(c)}" for v, c in enumerate(r.dominant_chart)]
    write_obj(r.mesh, path, comments)


def read_chart_ids(path) -> np.ndarray:
    """Dominant-chart ids from the ``# chart v id`` records written by :func:`export_obj`."""
    ids = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        tok = line.split()
        if len(tok) == 4 and tok[0] == "#" and tok[1] == "chart":
            ids[int(tok[2])] = int(tok[3])
    out = np.full(len(ids), -1, dtype=np.int64)
    for v, c in ids.items():
        out[v] = c
    return out

