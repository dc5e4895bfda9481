"""Multi-chart triangulations and scale-translation rigidity.

Three independent ways to decide whether per-chart scales and translations
can be recovered from centered/scaled landmark triplets:

* :func:`sufficient_condition` -- a purely combinatorial certificate (2-connected
  edge graph whose chordless cycles all have length <= 4), produced by growing a
  rigid subgraph one short chordless cycle at a time;
* :func:`rank_test` -- full column rank of the linear scale/translation system
  for a concrete landmark embedding;
* :func:`genericity_test` -- the rank test on random embeddings. Rigidity is a
  generic property, so one passing draw means almost every embedding passes.
"""

from __future__ import annotations

import itertools
import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

RIGID_BY_GRAPH = "RigidByGraph"
RIGID_BY_RANK = "RigidByRank"
NOT_RIGID = "NotRigid"
RIGID_GENERICALLY = "RigidGenerically"
NEVER_RIGID = "NeverRigid"

TOL_RANK = 1e-9


class TriangulationError(ValueError):
    pass


@dataclass(frozen=True)
class ChartTriangulation:
    """Abstract triangulation on landmark indices ``0..n-1``; each face is one chart.

    Files and user-facing text use 1-based indices, as in ``n c`` headers.
    """

    n: int
    faces: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        faces = tuple(tuple(int(i) for i in f) for f in self.faces)
        seen = set()
        for f in faces:
            if len(f) != 3 or len(set(f)) != 3:
                raise TriangulationError(f"face {f} must have three distinct indices")
            if min(f) < 0 or max(f) >= self.n:
                raise TriangulationError(f"face {f} has an index outside 0..{self.n - 1}")
            key = frozenset(f)
            if key in seen:
                raise TriangulationError(f"duplicate face {f}")
            seen.add(key)
        object.__setattr__(self, "faces", faces)

    @property
    def c(self) -> int:
        return len(self.faces)

    @property
    def edges(self) -> list[tuple[int, int]]:
        e = set()
        for i, j, k in self.faces:
            e.update({tuple(sorted((i, j))), tuple(sorted((j, k))), tuple(sorted((i, k)))})
        return sorted(e)

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g

    def incident_faces(self) -> list[list[int]]:
        inc: list[list[int]] = [[] for _ in range(self.n)]
        for p, f in enumerate(self.faces):
            for v in f:
                inc[v].append(p)
        return inc


def load_triangulation(path) -> ChartTriangulation:
    """First line ``n c``, then ``c`` lines of three 1-based indices. ``#`` comments allowed."""
    path = Path(path)
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.split("#", 1)[0].split()
            if s:
                try:
                    rows.append((lineno, [int(t) for t in s]))
                except ValueError:
                    raise TriangulationError(f"{path}:{lineno}: expected integers") from None
    if not rows or len(rows[0][1]) != 2:
        raise TriangulationError(f"{path}: first line must be 'n c'")
    n, c = rows[0][1]
    body = rows[1:]
    if len(body) != c:
        raise TriangulationError(f"{path}: header announces {c} faces, found {len(body)}")
    faces = []
    for lineno, vals in body:
        if len(vals) != 3:
            raise TriangulationError(f"{path}:{lineno}: a face needs exactly 3 indices")
        faces.append(tuple(v - 1 for v in vals))
    try:
        return ChartTriangulation(n, tuple(faces))
    except TriangulationError as exc:
        raise TriangulationError(f"{path}: {exc} (0-based)") from None


def save_triangulation(t: ChartTriangulation, path) -> None:
    lines = [f"{t.n} {t.c}"] + ["%d %d %d" % tuple(v + 1 for v in f) for f in t.faces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---- the linear scale/translation system ----

@dataclass(frozen=True, eq=False)
class STSystem:
    """Dense matrix of ``a_P r_{P,l} + b_P - q_l = 0`` plus the pinning rows of chart ``p0``.

    Unknown layout: ``[a_P, b_P(3)]`` per face in face order, then ``q_l(3)``
    per landmark. The last four rows encode ``a_p0 = 1, b_p0 = 0``.
    """

    matrix: np.ndarray
    rhs: np.ndarray
    p0: int
    n_faces: int
    n_vertices: int

    def col_a(self, p: int) -> int:
        return 4 * p

    def col_b(self, p: int) -> slice:
        return slice(4 * p + 1, 4 * p + 4)

    def col_q(self, l: int) -> slice:
        o = 4 * self.n_faces + 3 * l
        return slice(o, o + 3)

    def unpack(self, x):
        x = np.asarray(x)
        f = self.n_faces
        ab = x[: 4 * f].reshape(f, 4)
        return ab[:, 0], ab[:, 1:], x[4 * f:].reshape(self.n_vertices, 3)


def build_st_system(t: ChartTriangulation, r, p0: int = 0) -> STSystem:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (t.c, 3, 3):
        raise TriangulationError(f"expected landmark triplets of shape ({t.c}, 3, 3), got {r.shape}")
    if not 0 <= p0 < t.c:
        raise TriangulationError(f"fixed chart index {p0} out of range 0..{t.c - 1}")
    f, n = t.c, t.n
    a = np.zeros((9 * f + 4, 4 * f + 3 * n))
    row = 0
    for p, face in enumerate(t.faces):
        for s, l in enumerate(face):
            for d in range(3):
                a[row, 4 * p] = r[p, s, d]
                a[row, 4 * p + 1 + d] = 1.0
                a[row, 4 * f + 3 * l + d] = -1.0
                row += 1
    for d in range(4):
        a[row + d, 4 * p0 + d] = 1.0
    rhs = np.zeros(9 * f + 4)
    rhs[9 * f] = 1.0
    return STSystem(a, rhs, p0, f, n)


def normalized_triplets(t: ChartTriangulation, landmarks) -> np.ndarray:
    """Per-face landmark triplets, each centered and scaled to unit Frobenius norm."""
    q = np.asarray(landmarks, dtype=np.float64)
    if q.shape != (t.n, 3):
        raise TriangulationError(f"expected {t.n} landmarks in 3D, got shape {q.shape}")
    r = q[np.array(t.faces)]
    r = r - r.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(r.reshape(t.c, -1), axis=1)
    return r / np.where(norms > 0, norms, 1.0)[:, None, None]


# ---- certificates ----

@dataclass
class RigidityCertificate:
    verdict: str
    method: str
    witness: list[tuple[int, ...]] = field(default_factory=list)
    flex: np.ndarray | None = None
    reason: str = ""
    sigma_min: float | None = None
    sigma_max: float | None = None

    @property
    def rigid(self) -> bool:
        return self.verdict in (RIGID_BY_GRAPH, RIGID_BY_RANK)

    def to_dict(self) -> dict:
        d = {
            "verdict": self.verdict,
            "method": self.method,
            "reason": self.reason,
            "witness": [[v + 1 for v in c] for c in self.witness],
        }
        if self.flex is not None:
            d["flex"] = [float(v) for v in self.flex]
        if self.sigma_min is not None:
            d["sigma_min"] = self.sigma_min
            d["sigma_max"] = self.sigma_max
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RigidityCertificate":
        return cls(
            verdict=d["verdict"],
            method=d["method"],
            witness=[tuple(v - 1 for v in c) for c in d.get("witness", [])],
            flex=np.array(d["flex"]) if "flex" in d else None,
            reason=d.get("reason", ""),
            sigma_min=d.get("sigma_min"),
            sigma_max=d.get("sigma_max"),
        )

    @classmethod
    def loads(cls, text: str) -> "RigidityCertificate":
        return cls.from_dict(json.loads(text))


def _coplanar_quadruples(points: np.ndarray, tol: float) -> list[tuple[int, ...]]:
    n = len(points)
    if n < 4:
        return []
    combos = np.array(list(itertools.combinations(range(n), 4)))
    p = points[combos]
    e = p[:, 1:] - p[:, :1]
    vol = np.abs(np.linalg.det(e))
    scale = np.linalg.norm(e, axis=2).prod(axis=1)
    bad = vol <= tol * np.where(scale > 0, scale, 1.0)
    return [tuple(c) for c in combos[bad][:5]]


def rank_test(t: ChartTriangulation, landmarks, p0: int = 0, tol: float = TOL_RANK,
              check_generic: bool = True) -> RigidityCertificate:
    """Full-column-rank test of the scale/translation system at a concrete embedding.

    Returns ``RigidByRank`` when the smallest singular value exceeds ``tol``
    times the largest, otherwise ``NotRigid`` with the corresponding unit
    right-singular vector as the flex.
    """
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if check_generic:
        bad = _coplanar_quadruples(landmarks, 1e-9)
        if bad:
            warnings.warn(f"landmarks are not generic: co-planar quadruples {bad}", RuntimeWarning, stacklevel=2)
    system = build_st_system(t, normalized_triplets(t, landmarks), p0)
    a = system.matrix
    _, s, vt = np.linalg.svd(a, full_matrices=True)
    s_full = np.zeros(a.shape[1])
    s_full[: len(s)] = s
    smax = float(s_full.max())
    smin = float(s_full[-1])
    if smin > tol * smax:
        return RigidityCertificate(RIGID_BY_RANK, "rank", sigma_min=smin, sigma_max=smax,
                                   reason="system has full column rank")
    flex = vt[-1].copy()
    # deterministic sign: largest-magnitude entry positive
    if flex[np.argmax(np.abs(flex))] < 0:
        flex = -flex
    return RigidityCertificate(NOT_RIGID, "rank", flex=flex, sigma_min=smin, sigma_max=smax,
                               reason="system is rank deficient")


@dataclass
class GenericityResult:
    verdict: str
    passes: int
    trials: int


def genericity_test(t: ChartTriangulation, trials: int = 5, seed: int = 0, p0: int = 0) -> GenericityResult:
    """Run :func:`rank_test` on ``trials`` uniform random embeddings in ``[-1, 1]^3``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    passes = 0
    for child in np.random.SeedSequence(seed).spawn(trials):
        pts = np.random.default_rng(child).uniform(-1.0, 1.0, size=(t.n, 3))
        if rank_test(t, pts, p0, check_generic=False).rigid:
            passes += 1
    return GenericityResult(RIGID_GENERICALLY if passes else NEVER_RIGID, passes, trials)


# ---- chordless cycles ----

def _adjacency(g) -> dict:
    if isinstance(g, ChartTriangulation):
        g = g.graph()
    return {v: set(g.neighbors(v)) for v in sorted(g.nodes())}


def canonical_cycle(cycle) -> tuple:
    """Rotate so the smallest vertex is first; orient toward the smaller neighbour."""
    c = list(cycle)
    i = c.index(min(c))
    c = c[i:] + c[:i]
    if len(c) > 2 and c[-1] < c[1]:
        c = [c[0]] + c[1:][::-1]
    return tuple(c)


@dataclass
class ChordlessCycles:
    cycles: list[tuple[int, ...]]
    max_len: int
    longer: tuple[int, ...] | None

    @property
    def has_longer(self) -> bool:
        return self.longer is not None


def _short_chordless_cycles(adj: dict, max_len: int) -> list[tuple[int, ...]]:
    found = []
    for s in adj:
        stack = [[s, v] for v in sorted(adj[s]) if v > s]
        while stack:
            path = stack.pop()
            last = path[-1]
            interior = path[1:-1]
            for w in sorted(adj[last]):
                if w <= s or w in path:
                    continue
                if any(w in adj[x] for x in interior):
                    continue
                if s in adj[w]:
                    if path[1] < w:
                        found.append(tuple(path + [w]))
                elif len(path) + 1 < max_len:
                    stack.append(path + [w])
    return sorted(found, key=lambda c: (len(c), c))


def _induced_paths(adj: dict, length: int):
    """Induced paths with ``length`` vertices, each yielded once (first < last)."""
    for s in adj:
        stack = [[s]]
        while stack:
            path = stack.pop()
            if len(path) == length:
                if path[0] < path[-1]:
                    yield path
                continue
            last = path[-1]
            for w in sorted(adj[last]):
                if w in path or any(w in adj[x] for x in path[:-1]):
                    continue
                stack.append(path + [w])


def _find_long_hole(adj: dict, max_len: int) -> tuple[int, ...] | None:
    """A chordless cycle longer than ``max_len``, or None.

    Any such cycle contains an induced path on ``max_len`` vertices. Conversely,
    a shortest path between the ends of an induced path that avoids the closed
    neighbourhood of its interior closes it into a chordless cycle; shortest
    paths cannot carry chords, as in the cycle-shortening argument.
    """
    for path in _induced_paths(adj, max_len):
        x1, xl = path[0], path[-1]
        blocked = set(path[1:-1])
        for x in path[1:-1]:
            blocked |= adj[x]
        blocked -= {x1, xl}
        prev = {x1: None}
        queue = deque([x1])
        while queue:
            u = queue.popleft()
            if u == xl:
                break
            for w in sorted(adj[u]):
                if w in blocked or w in prev:
                    continue
                if u == x1 and w == xl:
                    continue
                prev[w] = u
                queue.append(w)
        if xl in prev:
            back = []
            u = prev[xl]
            while u != x1:
                back.append(u)
                u = prev[u]
            return canonical_cycle(path + back)
    return None


def enumerate_chordless_cycles(g, max_len: int = 4) -> ChordlessCycles:
    """All chordless cycles with at most ``max_len`` vertices, plus a longer one if any exists.

    ``g`` is a networkx graph or a :class:`ChartTriangulation` (its edge graph).
    Cycles are returned in canonical form (see :func:`canonical_cycle`).
    """
    if max_len < 3:
        raise ValueError("max_len must be >= 3")
    adj = _adjacency(g)
    return ChordlessCycles(_short_chordless_cycles(adj, max_len), max_len, _find_long_hole(adj, max_len))


# ---- combinatorial certificate ----

def _cycle_edges(c):
    return [(c[i], c[(i + 1) % len(c)]) for i in range(len(c))]


def grow_rigid_subgraph(g, cycles=None, start=None) -> tuple[set, list[tuple[int, ...]]]:
    """Grow a scale-translation rigid vertex set from one edge by absorbing short chordless cycles.

    A cycle is absorbable when one of its edges lies inside the grown set and
    one of its vertices lies outside. Among absorbable cycles the one with the
    lexicographically smallest sorted vertex set wins.
    """
    adj = _adjacency(g)
    if cycles is None:
        cycles = _short_chordless_cycles(adj, 4)
    edges = sorted(tuple(sorted((u, v))) for u in adj for v in adj[u] if u < v)
    if not edges:
        return set(adj) if len(adj) == 1 else set(), []
    grown = set(start if start is not None else edges[0])
    order = sorted(cycles, key=lambda c: (tuple(sorted(c)), c))
    witness = []
    progress = True
    while progress:
        progress = False
        for c in order:
            if set(c) <= grown:
                continue
            if any(u in grown and v in grown for u, v in _cycle_edges(c)):
                grown |= set(c)
                witness.append(c)
                progress = True
                break
    return grown, witness


def replay_growth(g, witness, start=None) -> bool:
    """Check a growth witness: every step is a chordless cycle of length <= 4
    sharing an edge with the grown set and adding a vertex; all vertices end up covered."""
    adj = _adjacency(g)
    edges = sorted(tuple(sorted((u, v))) for u in adj for v in adj[u] if u < v)
    grown = set(start if start is not None else edges[0])
    for c in witness:
        if not 3 <= len(c) <= 4:
            return False
        if any(v not in adj[u] for u, v in _cycle_edges(c)):
            return False
        cs = set(c)
        for i, u in enumerate(c):
            others = cs - {u, c[i - 1], c[(i + 1) % len(c)]}
            if adj[u] & others:
                return False
        if cs <= grown or not any(u in grown and v in grown for u, v in _cycle_edges(c)):
            return False
        grown |= cs
    return grown == set(adj)


def sufficient_condition(t) -> RigidityCertificate:
    """Combinatorial rigidity certificate.

    ``RigidByGraph`` when the edge graph is 2-connected and has no chordless
    cycle longer than 4; the witness is the list of cycles absorbed by
    :func:`grow_rigid_subgraph`. A negative answer only means this test could
    not certify rigidity -- fall back to :func:`rank_test`.
    """
    g = t.graph() if isinstance(t, ChartTriangulation) else t
    if g.number_of_nodes() < 3 or not nx.is_biconnected(g):
        cut = sorted(nx.articulation_points(g)) if nx.is_connected(g) else []
        why = f"edge graph is not 2-connected (cut vertices {[v + 1 for v in cut]})" if cut \
            else "edge graph is not 2-connected"
        return RigidityCertificate(NOT_RIGID, "graph", witness=[tuple(cut)] if cut else [], reason=why)
    found = enumerate_chordless_cycles(g, 4)
    if found.has_longer:
        return RigidityCertificate(NOT_RIGID, "graph", witness=[found.longer],
                                   reason=f"chordless cycle of length {len(found.longer)}")
    grown, witness = grow_rigid_subgraph(g, found.cycles)
    if grown != set(g.nodes()):
        return RigidityCertificate(NOT_RIGID, "graph", witness=witness,
                                   reason="growth procedure did not reach every vertex")
    return RigidityCertificate(RIGID_BY_GRAPH, "graph", witness=witness,
                               reason="2-connected with chordless cycles of length <= 4")


def certify(t: ChartTriangulation, trials: int = 5, seed: int = 0, p0: int = 0) -> RigidityCertificate:
    """Graph certificate first; otherwise the rank test on random embeddings.

    Returns the first passing rank certificate, or the last failing one (with
    its flex) when every draw is rank deficient.
    """
    cert = sufficient_condition(t)
    if cert.rigid:
        return cert
    last = None
    for child in np.random.SeedSequence(seed).spawn(trials):
        pts = np.random.default_rng(child).uniform(-1.0, 1.0, size=(t.n, 3))
        last = rank_test(t, pts, p0, check_generic=False)
        if last.rigid:
            last.reason += f"; graph test: {cert.reason}"
            return last
    last.reason += f" on all {trials} random embeddings; graph test: {cert.reason}"
    return last
