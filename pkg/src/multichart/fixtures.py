"""Deterministic test surfaces and landmark layouts."""

from __future__ import annotations

from importlib import resources

import numpy as np

from .graph import ChartTriangulation, load_triangulation
from .mesh import LandmarkSet, Mesh

TRIANGULATIONS = ("human16", "tetra4", "cut_vertex", "c5_ring", "quad_ring")

# latitude, longitude in degrees; roughly a standing figure seen from the front
_HUMAN_LATLON = [
    (70, -25),    # head right
    (50, 0),      # chin
    (35, 45),     # left shoulder
    (35, -45),    # right shoulder
    (20, 0),      # chest
    (15, 90),     # left elbow
    (15, -90),    # right elbow
    (0, 125),     # left wrist
    (0, -125),    # right wrist
    (-5, 160),    # left hand
    (-5, -160),   # right hand
    (70, 25),     # head left
    (-20, 40),    # left hip
    (-20, -40),   # right hip
    (-30, 0),     # crotch
    (-50, 35),    # left knee
    (-50, -35),   # right knee
    (-68, 60),    # left ankle
    (-68, -60),   # right ankle
    (-82, 120),   # left toe
    (-82, -120),  # right toe
]


def load_fixture_triangulation(name: str) -> ChartTriangulation:
    if name not in TRIANGULATIONS:
        raise KeyError(f"unknown triangulation fixture {name!r}; choose from {TRIANGULATIONS}")
    ref = resources.files("multichart") / "data" / f"{name}.tri"
    with resources.as_file(ref) as path:
        return load_triangulation(path)


def tetrahedron() -> Mesh:
    """Regular tetrahedron with outward counter-clockwise faces."""
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return Mesh(v, f, "tetrahedron")


def icosahedron() -> Mesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return Mesh(v, f, "icosahedron")


def icosphere(level: int = 2) -> Mesh:
    """Unit icosphere after ``level`` rounds of 4-to-1 subdivision (10*4^level + 2 vertices)."""
    m = icosahedron()
    verts = [tuple(p) for p in m.vertices]
    faces = m.faces.tolist()
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                p = (np.asarray(verts[i]) + np.asarray(verts[j])) / 2.0
                verts.append(tuple(p / np.linalg.norm(p)))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return Mesh(np.array(verts), np.array(faces), f"icosphere{level}")


def bumpy_sphere(level: int = 3, n_bumps: int = 12, amplitude: float = 0.15, width: float = 0.35,
                 seed: int = 7) -> Mesh:
    """Icosphere displaced radially by a sum of Gaussian bumps at random directions.

    Stands in for a scanned organic surface: smooth, star-shaped, with
    protrusions and dents of a few different sizes.
    """
    m = icosphere(level)
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_bumps, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    heights = amplitude * rng.uniform(-0.6, 1.0, size=n_bumps)
    widths = width * rng.uniform(0.6, 1.4, size=n_bumps)
    d = m.vertices
    cosang = d @ centers.T
    ang2 = np.arccos(np.clip(cosang, -1.0, 1.0)) ** 2
    r = 1.0 + (heights * np.exp(-ang2 / (2.0 * widths**2))).sum(axis=1)
    # mild anisotropy so the shape has no accidental symmetry
    scale = np.array([1.0, 0.8, 1.25])
    return Mesh(d * r[:, None] * scale, m.faces, f"bumpy{level}")


def _nearest_distinct(m: Mesh, directions: np.ndarray) -> LandmarkSet:
    center = m.centroid()
    dirs = m.vertices - center
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    taken: list[int] = []
    for d in directions:
        score = dirs @ (d / np.linalg.norm(d))
        for v in np.argsort(-score, kind="stable"):
            if int(v) not in taken:
                taken.append(int(v))
                break
    return LandmarkSet(taken)


def tetra_landmarks(m: Mesh) -> LandmarkSet:
    """Four vertices closest to the directions of a regular tetrahedron."""
    return _nearest_distinct(m, tetrahedron().vertices)


def human_landmarks(m: Mesh) -> LandmarkSet:
    """21 vertices placed like body landmarks, matching the ``human16`` triangulation."""
    lat, lon = np.radians(np.array(_HUMAN_LATLON, dtype=np.float64)).T
    # y up, x to the figure's left, z towards the viewer
    d = np.stack([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)], axis=1)
    return _nearest_distinct(m, d)


TETRA_TRIANGULATION = ChartTriangulation(4, np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]))
