"""Triangle meshes, landmarks, and the normalization/alignment used to prepare inputs."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Raised for malformed meshes or unreadable mesh/landmark files."""


class ObjParseError(MeshError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Indexed triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (n, 3)
    faces : array_like, shape (m, 3)
        0-based vertex indices.
    name : str, optional

    Both arrays are copied and made read-only.
    """

    vertices: np.ndarray
    faces: np.ndarray
    name: str | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (m, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise MeshError(f"degenerate face(s) at {np.flatnonzero(degenerate)[:10].tolist()}")
        object.__setattr__(self, "vertices", _frozen(v, np.float64))
        object.__setattr__(self, "faces", _frozen(f, np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted pairs, shape (e, 2)."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def face_areas(self) -> np.ndarray:
        p = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def centroid(self) -> np.ndarray:
        """Area-weighted surface centroid (integral of position over the surface)."""
        a = self.face_areas()
        total = a.sum()
        if total <= 0:
            raise MeshError("mesh has zero surface area")
        c = self.vertices[self.faces].mean(axis=1)
        return (a[:, None] * c).sum(axis=0) / total

    def signed_volume(self) -> float:
        p = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces, self.name)

    def flipped(self) -> "Mesh":
        return Mesh(self.vertices, self.faces[:, ::-1], self.name)


@dataclass(frozen=True)
class LandmarkSet:
    """Distinct vertex indices into a mesh (at least three)."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(idx) < 3:
            raise MeshError("a landmark set needs at least 3 landmarks")
        if len(set(idx)) != len(idx):
            raise MeshError("landmark indices must be distinct")
        if min(idx) < 0:
            raise MeshError("landmark indices must be non-negative")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return self.indices[i]

    def check(self, mesh: Mesh) -> "LandmarkSet":
        if max(self.indices) >= mesh.n_vertices:
            raise MeshError(f"landmark index {max(self.indices)} out of range for {mesh.n_vertices} vertices")
        return self

    def positions(self, mesh: Mesh) -> np.ndarray:
        return mesh.vertices[list(self.check(mesh).indices)]


@dataclass(frozen=True, eq=False)
class AlignmentTransform:
    """Similarity ``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise MeshError("rotation must be 3x3")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8) or abs(np.linalg.det(r) - 1.0) > 1e-8:
            raise MeshError("rotation must be special orthogonal")
        if not self.scale > 0:
            raise MeshError("scale must be positive")
        object.__setattr__(self, "rotation", _frozen(r, np.float64))
        object.__setattr__(self, "translation", _frozen(np.reshape(self.translation, 3), np.float64))
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.rotation.T + self.translation


# ---- OBJ / landmark IO ----

def _parse_index(token: str, n_vertices: int) -> int:
    i = int(token.split("/")[0])
    if i < 0:
        i = n_vertices + i
    else:
        i -= 1
    return i


def load_obj(path) -> Mesh:
    """Read the ``v`` and ``f`` records of a Wavefront OBJ file.

    Polygons are fan-triangulated around their first corner. Texture and
    normal indices (``f 1/2/3``) are ignored; negative indices are relative.
    """
    path = Path(path)
    vertices, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split("#", 1)[0].split()
            if not tokens:
                continue
            tag = tokens[0]
            if tag == "v":
                if len(tokens) < 4:
                    raise ObjParseError(path, lineno, "vertex record needs 3 coordinates")
                try:
                    vertices.append([float(t) for t in tokens[1:4]])
                except ValueError as exc:
                    raise ObjParseError(path, lineno, str(exc)) from None
            elif tag == "f":
                if len(tokens) < 4:
                    raise ObjParseError(path, lineno, f"face record needs at least 3 indices, got {len(tokens) - 1}")
                try:
                    idx = [_parse_index(t, len(vertices)) for t in tokens[1:]]
                except ValueError as exc:
                    raise ObjParseError(path, lineno, str(exc)) from None
                for i in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[i], idx[i + 1]))
    if not vertices:
        raise MeshError(f"{path}: no vertices")
    try:
        return Mesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3), name=path.stem)
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None


def write_obj(mesh: Mesh, path, comments: list[str] | None = None) -> None:
    lines = [f"# {c}" for c in (comments or [])]
    lines += ["v %.17g %.17g %.17g" % tuple(p) for p in mesh.vertices]
    lines += ["f %d %d %d" % tuple(f + 1) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_landmarks(path) -> LandmarkSet:
    """Plain text, one 0-based vertex index per line; ``#`` starts a comment."""
    path = Path(path)
    idx = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            try:
                idx.append(int(s))
            except ValueError:
                raise MeshError(f"{path}:{lineno}: not an integer: {s!r}") from None
    return LandmarkSet(tuple(idx))


def write_landmarks(landmarks: LandmarkSet, path, comment: str | None = None) -> None:
    lines = [f"# {comment}"] if comment else []
    lines += [str(i) for i in landmarks.indices]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---- topology ----

@dataclass
class TopologyReport:
    ok: bool
    euler: int
    n_components: int
    boundary_edges: list[tuple[int, int]]
    nonmanifold_edges: list[tuple[int, int]]
    nonmanifold_vertices: list[int]
    consistently_oriented: bool

    def __bool__(self):
        return self.ok

    def describe(self) -> str:
        if self.ok:
            return "closed genus-zero manifold"
        parts = [f"euler characteristic {self.euler}"]
        if self.n_components != 1:
            parts.append(f"{self.n_components} components")
        if self.boundary_edges:
            parts.append(f"{len(self.boundary_edges)} boundary edges, e.g. {self.boundary_edges[:5]}")
        if self.nonmanifold_edges:
            parts.append(f"{len(self.nonmanifold_edges)} non-manifold edges, e.g. {self.nonmanifold_edges[:5]}")
        if self.nonmanifold_vertices:
            parts.append(f"non-manifold vertices {self.nonmanifold_vertices[:5]}")
        return "; ".join(parts)


def _components(n: int, edges: np.ndarray) -> int:
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    used = np.zeros(n, dtype=bool)
    used[edges.ravel()] = True
    g = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    _, labels = connected_components(g, directed=False)
    return len(np.unique(labels[used]))


def validate_genus_zero(m: Mesh) -> TopologyReport:
    """Check that ``m`` is a connected, closed, edge-manifold surface with V - E + F = 2.

    Never raises; the returned report is falsy when the check fails and lists
    the offending edges and vertices.
    """
    f = m.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    undirected = np.sort(directed, axis=1)
    uniq, counts = np.unique(undirected, axis=0, return_counts=True)
    boundary = [tuple(map(int, e)) for e in uniq[counts == 1]]
    nonmanifold = [tuple(map(int, e)) for e in uniq[counts > 2]]
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    oriented = bool((dcounts == 1).all())

    used = np.unique(f)
    euler = len(used) - len(uniq) + len(f)
    n_comp = _components(m.n_vertices, uniq) if len(uniq) else 0

    # vertex links must be a single cycle (no bow-ties)
    bad_vertices = []
    if not boundary and not nonmanifold:
        link_edges: dict[int, list[tuple[int, int]]] = {}
        for a, b, c in f.tolist():
            link_edges.setdefault(a, []).append((b, c))
            link_edges.setdefault(b, []).append((c, a))
            link_edges.setdefault(c, []).append((a, b))
        for v, le in link_edges.items():
            if not _is_single_cycle(le):
                bad_vertices.append(v)

    ok = (
        not boundary
        and not nonmanifold
        and not bad_vertices
        and n_comp == 1
        and euler == 2
        and len(used) == m.n_vertices
    )
    return TopologyReport(ok, int(euler), int(n_comp), boundary, nonmanifold, sorted(bad_vertices), oriented)


def _is_single_cycle(edges: list[tuple[int, int]]) -> bool:
    adj: dict[int, list[int]] = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    if any(len(n) != 2 for n in adj.values()):
        return False
    start = next(iter(adj))
    prev, cur, steps = None, start, 0
    while True:
        nxt = adj[cur][0] if adj[cur][0] != prev else adj[cur][1]
        prev, cur = cur, nxt
        steps += 1
        if cur == start:
            break
    return steps == len(adj)


def vertex_adjacency(m: Mesh) -> list[list[int]]:
    nbrs: list[set[int]] = [set() for _ in range(m.n_vertices)]
    for a, b in m.edges().tolist():
        nbrs[a].add(b)
        nbrs[b].add(a)
    return [sorted(s) for s in nbrs]


def edge_multiplicity(m: Mesh) -> Counter:
    c: Counter = Counter()
    for a, b, cc in m.faces.tolist():
        for e in ((a, b), (b, cc), (cc, a)):
            c[tuple(sorted(e))] += 1
    return c


# ---- normalization and alignment ----

def normalize_mesh(m: Mesh) -> tuple[Mesh, AlignmentTransform]:
    """Center the surface centroid at the origin and scale to unit surface area."""
    area = m.area()
    if not area > 0:
        raise MeshError("cannot normalize a mesh with zero surface area")
    c = m.centroid()
    s = 1.0 / np.sqrt(area)
    t = AlignmentTransform(np.eye(3), -s * c, s)
    return m.with_vertices(t.apply(m.vertices)), t


def procrustes_align(src, dst) -> AlignmentTransform:
    """Rotation and translation minimizing ``sum |R src_i + t - dst_i|^2``.

    Reflections are excluded by flipping the last singular direction when the
    SVD solution has negative determinant. No scaling.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise MeshError("procrustes_align needs two (n, 3) point lists of equal length")
    if len(src) < 3:
        raise MeshError("procrustes_align needs at least 3 points")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    for pts, label in ((a, "source"), (b, "target")):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
            raise MeshError(f"degenerate (collinear) {label} configuration")
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return AlignmentTransform(r, cd - r @ cs, 1.0)


def fit_similarity(src, dst) -> tuple[float, np.ndarray, float]:
    """Least-squares ``dst ~ sigma * src + tau`` (no rotation). Returns (sigma, tau, rms)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    denom = float((a * a).sum())
    sigma = float((a * b).sum()) / denom if denom > 0 else 1.0
    tau = cd - sigma * cs
    res = sigma * src + tau - dst
    return sigma, tau, float(np.sqrt((res * res).sum(axis=1).mean()))
