"""Toric charts: four-copy torus cover of a sphere-type mesh and its flat embedding.

Given a landmark triplet ``(a, b, c)`` the mesh is cut along the shortest path
``a -> b -> c``. The cut disk is embedded in the plane with a Tutte-style
linear system whose seam conditions make the four rotated copies of the disk
tile the flat torus ``[-1, 1)^2``:

* ``a`` sits at the center ``(0, 0)``, ``c`` at the corners ``(+-1, +-1)``,
  the two sides of ``b`` at the edge midpoints ``(1, 0)`` and ``(0, 1)``;
* a vertex on the ``a-b`` seam and its twin are related by a quarter turn
  about the center, on the ``b-c`` seam by a quarter turn about the corner.

Copy ``q`` of the disk is the disk rotated by ``q`` quarter turns about the
origin, so the deck group of the cover is the rotation group of order four.
Edge weights are cotangent weights clamped to a small positive floor; positive
weights make the embedding bijective.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, MeshError, validate_genus_zero

CENTER = np.array([0.0, 0.0])
CORNER = np.array([1.0, 1.0])
EDGE_LEFT = np.array([1.0, 0.0])
EDGE_RIGHT = np.array([0.0, 1.0])

SEAM_CENTER = 1  # between a and b; twins related by a quarter turn about the center
SEAM_CORNER = 2  # between b and c; twins related by a quarter turn about the corner


class FlattenError(RuntimeError):
    pass


def rotate_quarter(x, q: int) -> np.ndarray:
    """Rotate 2D points by ``q`` quarter turns counter-clockwise about the origin (exact)."""
    x = np.asarray(x, dtype=np.float64)
    q %= 4
    if q == 0:
        return x.copy()
    u, v = x[..., 0], x[..., 1]
    if q == 1:
        return np.stack([-v, u], axis=-1)
    if q == 2:
        return np.stack([-u, -v], axis=-1)
    return np.stack([v, -u], axis=-1)


def wrap_torus(x) -> np.ndarray:
    """Map points to the fundamental square ``[-1, 1)^2``."""
    x = np.asarray(x, dtype=np.float64)
    return x - 2.0 * np.floor((x + 1.0) / 2.0)


# ---- cutting and stitching ----

def _edge_graph(mesh: Mesh):
    adj: list[list[int]] = [[] for _ in range(mesh.n_vertices)]
    for i, j in mesh.edges().tolist():
        adj[i].append(j)
        adj[j].append(i)
    return [sorted(a) for a in adj]


def _shortest_path(adj, pos, src: int, dst: int, banned: set) -> list[int] | None:
    """Dijkstra on Euclidean edge lengths; equal distances prefer the smaller predecessor index."""
    dist = {src: 0.0}
    prev = {src: -1}
    heap = [(0.0, src)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == dst:
            break
        for w in adj[u]:
            if w in banned or w in done:
                continue
            nd = d + float(np.linalg.norm(pos[u] - pos[w]))
            if w not in dist or nd < dist[w] or (nd == dist[w] and u < prev[w]):
                dist[w] = nd
                prev[w] = u
                heapq.heappush(heap, (nd, w))
    if dst not in done:
        return None
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]])
    return path[::-1]


@dataclass(frozen=True, eq=False)
class Cover:
    """Cut disk of a mesh and the four-copy torus stitched from it.

    Disk vertex ids ``0..n-1`` are the original vertices (left side of the cut);
    ids ``>= n`` are right-side twins of path vertices. Cover vertex ``key[i]``
    is the representative ``(copy, disk vertex)`` of cover vertex ``i``.
    """

    mesh: Mesh
    triplet: tuple[int, int, int]
    path: tuple[int, ...]
    disk_faces: np.ndarray
    disk_to_orig: np.ndarray
    twin_left: np.ndarray  # left partner of a right twin, -1 otherwise
    seam: np.ndarray  # SEAM_* for right twins, 0 otherwise
    b_right: int
    cover_id: np.ndarray  # (4, n_disk) -> cover vertex
    cover_faces: np.ndarray  # (4 * n_faces, 3)
    face_copy: np.ndarray
    key: np.ndarray  # (n_cover, 2) representative (copy, disk vertex)

    @property
    def n_disk(self) -> int:
        return len(self.disk_to_orig)

    @property
    def n_cover_vertices(self) -> int:
        return len(self.key)

    @property
    def cover_to_orig(self) -> np.ndarray:
        return self.disk_to_orig[self.key[:, 1]]

    @property
    def cover_copy(self) -> np.ndarray:
        return self.key[:, 0]

    def euler_characteristic(self) -> int:
        f = self.cover_faces
        e = np.unique(np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1), axis=0)
        return self.n_cover_vertices - len(e) + len(f)

    def copies_of(self, v: int) -> list[int]:
        """Cover vertices over original vertex ``v``."""
        return sorted(set(np.flatnonzero(self.cover_to_orig == v).tolist()))


def build_cover(m: Mesh, triplet) -> Cover:
    """Cut ``m`` along the shortest path ``a -> b -> c`` and stitch four copies into a torus.

    The second leg is searched with the first leg's vertices (except ``b``)
    removed, so the two legs never share an edge.
    """
    a, b, c = (int(i) for i in triplet)
    if len({a, b, c}) != 3:
        raise FlattenError(f"triplet {triplet} must have three distinct vertices")
    if max(a, b, c) >= m.n_vertices or min(a, b, c) < 0:
        raise FlattenError(f"triplet {triplet} out of range")
    report = validate_genus_zero(m)
    if not report:
        raise FlattenError(f"mesh is not a closed genus-zero manifold: {report.describe()}")
    if not report.consistently_oriented:
        raise FlattenError("mesh faces are not consistently oriented")
    if m.signed_volume() < 0:
        m = m.flipped()

    adj = _edge_graph(m)
    leg1 = _shortest_path(adj, m.vertices, a, b, banned={c})
    if leg1 is None:
        raise FlattenError(f"no path from {a} to {b}")
    leg2 = _shortest_path(adj, m.vertices, b, c, banned=set(leg1[:-1]))
    if leg2 is None:
        raise FlattenError(f"degenerate landmark path: {b} -> {c} blocked by the first leg")
    path = leg1 + leg2[1:]
    mid = len(leg1) - 1

    faces = m.faces.tolist()
    vertex_faces: dict[int, list[int]] = {}
    for fi, f in enumerate(faces):
        for v in f:
            vertex_faces.setdefault(v, []).append(fi)

    def has_directed(f, u, v):
        return (f[0], f[1]) == (u, v) or (f[1], f[2]) == (u, v) or (f[2], f[0]) == (u, v)

    # classify the faces around every interior path vertex before renaming anything
    right_sides = []
    for t in range(1, len(path) - 1):
        u, v, w = path[t - 1], path[t], path[t + 1]
        around = vertex_faces[v]
        comp = {fi: fi for fi in around}

        def find(x):
            while comp[x] != x:
                comp[x] = comp[comp[x]]
                x = comp[x]
            return x

        by_spoke: dict[int, list[int]] = {}
        for fi in around:
            for y in faces[fi]:
                if y not in (v, u, w):
                    by_spoke.setdefault(y, []).append(fi)
        for group in by_spoke.values():
            for fi in group[1:]:
                comp[find(fi)] = find(group[0])
        start = [fi for fi in around if has_directed(faces[fi], u, v)]
        end = [fi for fi in around if has_directed(faces[fi], v, w)]
        if len(start) != 1 or len(end) != 1 or find(start[0]) != find(end[0]):
            raise FlattenError(f"cannot split the fan of path vertex {v}")
        left = find(start[0])
        right = [fi for fi in around if find(fi) != left]
        if not right:
            raise FlattenError(f"path vertex {v} has no faces on the right of the cut")
        right_sides.append((t, v, right))

    n = m.n_vertices
    disk_to_orig = list(range(n))
    twin_left = [-1] * n
    seam = [0] * n
    b_right = -1
    for t, v, right in right_sides:
        d = len(disk_to_orig)
        disk_to_orig.append(v)
        twin_left.append(v)
        if t < mid:
            seam.append(SEAM_CENTER)
        elif t > mid:
            seam.append(SEAM_CORNER)
        else:
            seam.append(SEAM_CENTER)  # b_right is fixed; the seam tag is unused
            b_right = d
        for fi in right:
            faces[fi] = [d if x == v else x for x in faces[fi]]
    disk_faces = np.array(faces, dtype=np.int64)
    disk_to_orig = np.array(disk_to_orig, dtype=np.int64)
    twin_left = np.array(twin_left, dtype=np.int64)
    seam = np.array(seam, dtype=np.int64)
    n_disk = len(disk_to_orig)

    # stitch four copies: union-find over (copy, disk vertex)
    parent = np.arange(4 * n_disk)

    def root(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        rx, ry = root(x), root(y)
        if rx != ry:
            parent[max(rx, ry)] = min(rx, ry)

    def k(q, d):
        return (q % 4) * n_disk + d

    for q in range(4):
        union(k(q, a), k(0, a))
        union(k(q, c), k(0, c))
        for d in np.flatnonzero(twin_left >= 0).tolist():
            left = int(twin_left[d])
            if d == b_right:
                union(k(q, d), k(q + 1, left))
                union(k(q, d), k(q - 1, left))
            elif seam[d] == SEAM_CENTER:
                union(k(q, d), k(q + 1, left))
            else:
                union(k(q, d), k(q - 1, left))

    roots = np.array([root(x) for x in range(4 * n_disk)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    # number cover vertices by first occurrence in (copy, disk vertex) order
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    cover_id = rank[inverse].reshape(4, n_disk)
    rep = np.sort(first)
    key = np.stack([rep // n_disk, rep % n_disk], axis=1)

    cover_faces = np.concatenate([cover_id[q][disk_faces] for q in range(4)])
    face_copy = np.repeat(np.arange(4), len(disk_faces))
    return Cover(m, (a, b, c), tuple(path), disk_faces, disk_to_orig, twin_left, seam, b_right,
                 cover_id, cover_faces, face_copy, key)


# ---- flat embedding ----

def _twin_map(seam_kind: int):
    """Return (R, t) with x_right = R x_left + t, R as a row-major 2x2 tuple."""
    if seam_kind == SEAM_CENTER:
        return (0.0, -1.0, 1.0, 0.0), (0.0, 0.0)
    # quarter turn clockwise about the corner: (x, y) -> (y, 2 - x)
    return (0.0, 1.0, -1.0, 0.0), (0.0, 2.0)


def _mat_mul(p, q):
    return (p[0] * q[0] + p[1] * q[2], p[0] * q[1] + p[1] * q[3],
            p[2] * q[0] + p[3] * q[2], p[2] * q[1] + p[3] * q[3])


def _mat_vec(p, v):
    return (p[0] * v[0] + p[1] * v[1], p[2] * v[0] + p[3] * v[1])


def _transpose(p):
    return (p[0], p[2], p[1], p[3])


def edge_weights(positions: np.ndarray, faces: np.ndarray, n: int, min_weight: float = 1e-3) -> sp.csr_matrix:
    """Symmetric cotangent weights clamped below at ``min_weight`` times their mean magnitude."""
    p = positions[faces]
    rows, cols, vals = [], [], []
    for s in range(3):
        i, j = faces[:, (s + 1) % 3], faces[:, (s + 2) % 3]
        e1 = p[:, (s + 1) % 3] - p[:, s]
        e2 = p[:, (s + 2) % 3] - p[:, s]
        cot = np.einsum("ij,ij->i", e1, e2) / np.maximum(np.linalg.norm(np.cross(e1, e2), axis=1), 1e-300)
        rows += [i, j]
        cols += [j, i]
        vals += [0.5 * cot, 0.5 * cot]
    w = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    w.sum_duplicates()
    floor = min_weight * float(np.abs(w.data).mean())
    w.data = np.maximum(w.data, floor)
    return w


@dataclass(eq=False)
class FlatChart:
    """Piecewise-linear toric chart of a mesh.

    ``uv`` holds one point of ``[-1, 1)^2`` per cover vertex; a cover face's
    corners are ``uv[face] + 2 * face_offsets`` (unwrapped across the square's
    edges). ``anchors`` maps ``center``/``edge``/``corner`` to cover vertices.
    """

    positions: np.ndarray
    cover_faces: np.ndarray
    face_offsets: np.ndarray
    uv: np.ndarray
    cover_to_orig: np.ndarray
    cover_copy: np.ndarray
    triplet: tuple[int, int, int]
    anchors: dict = field(default_factory=dict)
    cover: Cover | None = None

    @property
    def n_orig(self) -> int:
        return len(self.positions)

    def corner_uv(self) -> np.ndarray:
        return self.uv[self.cover_faces] + 2.0 * self.face_offsets

    def signed_uv_areas(self) -> np.ndarray:
        c = self.corner_uv()
        e1, e2 = c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def surface_areas(self) -> np.ndarray:
        p = self.positions[self.cover_to_orig[self.cover_faces]]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def flipped_faces(self) -> np.ndarray:
        return np.flatnonzero(self.signed_uv_areas() <= 0)

    def uv_area(self) -> float:
        return float(self.signed_uv_areas().sum())

    def representative(self) -> np.ndarray:
        """One cover vertex per original vertex (lowest copy label)."""
        rep = np.full(self.n_orig, -1, dtype=np.int64)
        order = np.lexsort((np.arange(len(self.uv)), self.cover_copy))
        for cv in order[::-1]:
            rep[self.cover_to_orig[cv]] = cv
        return rep

    def anchor_uv(self) -> dict:
        return {
            "center": self.uv[self.anchors["center"]],
            "edge": self.uv[list(self.anchors["edge"])],
            "corner": self.uv[self.anchors["corner"]],
        }


def flatten(cover: Cover, min_weight: float = 1e-3, tol: float = 1e-10) -> FlatChart:
    """Embed the cover in the flat torus; see the module docstring for the construction."""
    m = cover.mesh
    a, b, c = cover.triplet
    nd = cover.n_disk
    bl, br = b, cover.b_right
    positions = m.vertices[cover.disk_to_orig]
    w = edge_weights(positions, cover.disk_faces, nd, min_weight)

    fixed = {a: tuple(CENTER), c: tuple(CORNER), bl: tuple(EDGE_LEFT), br: tuple(EDGE_RIGHT)}
    twin_left = cover.twin_left
    free = [d for d in range(nd) if d not in fixed and twin_left[d] < 0]
    index = {d: i for i, d in enumerate(free)}
    right_of = {int(twin_left[d]): d for d in np.flatnonzero(twin_left >= 0) if d != br}

    eye = (1.0, 0.0, 0.0, 1.0)

    def expr(d):
        """x_d = M x_free + const, as (M, free index or None, const)."""
        if d in fixed:
            return eye, None, fixed[d]
        left = int(twin_left[d])
        if left >= 0:
            rot, t = _twin_map(int(cover.seam[d]))
            return rot, index[left], t
        return eye, index[d], (0.0, 0.0)

    rows, cols, vals = [], [], []
    rhs = np.zeros(2 * len(free))

    def add(row, coef, e):
        mat, col, const = e
        if col is not None:
            blk = _mat_mul(coef, mat)
            for r in range(2):
                for s in range(2):
                    v = blk[2 * r + s]
                    if v != 0.0:
                        rows.append(2 * row + r)
                        cols.append(2 * col + s)
                        vals.append(v)
        cv = _mat_vec(coef, const)
        rhs[2 * row] -= cv[0]
        rhs[2 * row + 1] -= cv[1]

    indptr, indices, data = w.indptr, w.indices, w.data
    for d in free:
        row = index[d]
        sides = [(d, eye)]
        if d in right_of:
            rd = right_of[d]
            rot, _ = _twin_map(int(cover.seam[rd]))
            sides.append((rd, _transpose(rot)))
        for center, back in sides:
            ec = expr(center)
            for ptr in range(indptr[center], indptr[center + 1]):
                j, wij = int(indices[ptr]), float(data[ptr])
                coef = tuple(wij * x for x in back)
                add(row, coef, expr(j))
                add(row, tuple(-x for x in coef), ec)

    n = 2 * len(free)
    mat = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    if n:
        x = spla.spsolve(mat, rhs)
        if not np.all(np.isfinite(x)):
            raise FlattenError("flattening system is singular")
        res = np.linalg.norm(mat @ x - rhs)
        if res > tol * max(1.0, np.linalg.norm(rhs)):
            raise FlattenError(f"flattening solve did not converge (residual {res:.3e})")
    else:
        x = np.zeros(0)
    xf = x.reshape(-1, 2)

    disk_uv = np.empty((nd, 2))
    for d in range(nd):
        mat_d, col, const = expr(d)
        v = xf[col] if col is not None else (0.0, 0.0)
        mv = _mat_vec(mat_d, v)
        disk_uv[d] = (mv[0] + const[0], mv[1] + const[1])

    chart = _assemble_chart(cover, disk_uv)
    flipped = chart.flipped_faces()
    if len(flipped):
        raise FlattenError(f"{len(flipped)} flipped faces in the flat chart: {flipped[:20].tolist()}")
    return chart


def _assemble_chart(cover: Cover, disk_uv: np.ndarray) -> FlatChart:
    copies = np.stack([rotate_quarter(disk_uv, q) for q in range(4)])  # (4, n_disk, 2)
    q, d = cover.key[:, 0], cover.key[:, 1]
    uv = wrap_torus(copies[q, d])
    corner = np.concatenate([copies[qq][cover.disk_faces] for qq in range(4)])
    offsets = np.rint((corner - uv[cover.cover_faces]) / 2.0).astype(np.int64)
    a, b, c = cover.triplet
    anchors = {
        "center": int(cover.cover_id[0, a]),
        "edge": (int(cover.cover_id[0, b]), int(cover.cover_id[1, b])),
        "corner": int(cover.cover_id[0, c]),
    }
    return FlatChart(cover.mesh.vertices, cover.cover_faces, offsets, uv, cover.cover_to_orig,
                     cover.cover_copy, cover.triplet, anchors, cover)


def chart_for(m: Mesh, triplet, min_weight: float = 1e-3) -> FlatChart:
    return flatten(build_cover(m, triplet), min_weight=min_weight)


# ---- area scale and covering ----

@dataclass
class ScaleField:
    """Per-vertex area magnification of the surface-to-torus map.

    ``values[v]`` is (uv 1-ring area) / (surface 1-ring area) at one copy of
    original vertex ``v``; ``per_cover`` has the same ratio for every cover
    vertex. On unit-area meshes the mean magnification is 1.
    """

    values: np.ndarray
    per_cover: np.ndarray
    copy_spread: float
    uv_ring: np.ndarray  # uv 1-ring area at the representative copy


def _ring_sums(faces: np.ndarray, per_face: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    for s in range(3):
        np.add.at(out, faces[:, s], per_face)
    return out


def area_scale(chart: FlatChart) -> ScaleField:
    nc = len(chart.uv)
    uv_ring = _ring_sums(chart.cover_faces, np.abs(chart.signed_uv_areas()), nc)
    surf_ring = _ring_sums(chart.cover_faces, chart.surface_areas(), nc)
    per_cover = uv_ring / surf_ring
    rep = chart.representative()
    values = per_cover[rep]
    with np.errstate(divide="ignore", invalid="ignore"):
        spread = per_cover / values[chart.cover_to_orig]
    spread = spread[np.isfinite(spread)]
    return ScaleField(values, per_cover, float(np.max(np.abs(spread - 1.0))) if len(spread) else 0.0,
                      uv_ring[rep])


@dataclass
class CoverageReport:
    delta: float
    max_scale: np.ndarray
    best_chart: np.ndarray
    fraction: float
    uncovered: list[int]

    def summary(self) -> dict:
        return {
            "delta": self.delta,
            "coverage_fraction": self.fraction,
            "n_uncovered": len(self.uncovered),
            "min_max_scale": float(self.max_scale.min()),
            "median_max_scale": float(np.median(self.max_scale)),
        }


def coverage_report(charts, delta: float) -> CoverageReport:
    """Fraction of vertices whose best chart magnifies area by at least ``delta``."""
    charts = list(charts)
    if not charts:
        raise ValueError("need at least one chart")
    n = charts[0].n_orig
    if any(ch.n_orig != n for ch in charts):
        raise ValueError("charts were computed on different meshes")
    scales = np.stack([area_scale(ch).values for ch in charts])
    best = np.argmax(scales, axis=0)
    mx = scales[best, np.arange(n)]
    covered = mx >= delta
    return CoverageReport(float(delta), mx, best, float(covered.mean()), np.flatnonzero(~covered).tolist())


# ---- binary IO ----

_CHART_MAGIC = b"MCFC"
_CHART_VERSION = 1


def chart_to_bytes(chart: FlatChart) -> bytes:
    """``MCFC`` header (version, cover vertices, cover faces, original vertices), then
    uv (<f8), faces (<i4), face offsets (<i1), correspondence (<i4 orig, copy),
    anchor record (<i4 triplet, center, edge x2, corner) and original positions (<f8)."""
    nc, nf, no = len(chart.uv), len(chart.cover_faces), chart.n_orig
    parts = [
        _CHART_MAGIC,
        struct.pack("<4I", _CHART_VERSION, nc, nf, no),
        np.ascontiguousarray(chart.uv, dtype="<f8").tobytes(),
        np.ascontiguousarray(chart.cover_faces, dtype="<i4").tobytes(),
        np.ascontiguousarray(chart.face_offsets, dtype="<i1").tobytes(),
        np.ascontiguousarray(np.stack([chart.cover_to_orig, chart.cover_copy], axis=1), dtype="<i4").tobytes(),
        struct.pack("<7i", *chart.triplet, chart.anchors["center"], *chart.anchors["edge"], chart.anchors["corner"]),
        np.ascontiguousarray(chart.positions, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def chart_from_bytes(data: bytes) -> FlatChart:
    if data[:4] != _CHART_MAGIC:
        raise ValueError("not a flat chart file (bad magic)")
    version, nc, nf, no = struct.unpack_from("<4I", data, 4)
    if version != _CHART_VERSION:
        raise ValueError(f"unsupported chart file version {version}")
    off = 20

    def take(dtype, shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr

    uv = take("<f8", (nc, 2)).astype(np.float64)
    faces = take("<i4", (nf, 3)).astype(np.int64)
    offsets = take("<i1", (nf, 3, 2)).astype(np.int64)
    corr = take("<i4", (nc, 2)).astype(np.int64)
    rec = struct.unpack_from("<7i", data, off)
    off += 28
    positions = take("<f8", (no, 3)).astype(np.float64)
    anchors = {"center": rec[3], "edge": (rec[4], rec[5]), "corner": rec[6]}
    return FlatChart(positions, faces, offsets, uv, corr[:, 0], corr[:, 1], tuple(rec[:3]), anchors)


def save_chart(chart: FlatChart, path) -> None:
    Path(path).write_bytes(chart_to_bytes(chart))


def load_chart(path) -> FlatChart:
    return chart_from_bytes(Path(path).read_bytes())


def check_triplet(m: Mesh, triplet) -> None:
    if len(set(triplet)) != 3 or max(triplet) >= m.n_vertices:
        raise MeshError(f"invalid triplet {triplet}")
