"""Scale/translation recovery and the landmark-consistency projection.

Every chart ``P`` of a multi-chart tensor is an unknown similarity-free copy
of the surface: ``a_P * y_{P,l} + b_P = q_l`` for each of its three landmarks
``l``. Pinning one chart (``a = 1, b = 0``) removes the global gauge, and for
rigid triangulations the least-squares solution is unique.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .graph import ChartTriangulation, build_st_system
from .tensorize import LandmarkTriplets, MultiChartTensor, extract_landmarks, write_landmarks

TOL_RANK = 1e-9
MIN_SCALE = 1e-8


class STRecoveryError(RuntimeError):
    """Least-squares system is rank deficient; ``flex`` spans the null direction."""

    def __init__(self, message: str, flex: np.ndarray | None = None):
        super().__init__(message)
        self.flex = flex


@dataclass
class RegularizerConfig:
    """Penalty ``lam * sum_P (a_P - mean_scales[P])^2``."""

    lam: float
    mean_scales: np.ndarray

    def __post_init__(self):
        self.lam = float(self.lam)
        self.mean_scales = np.asarray(self.mean_scales, dtype=np.float64).ravel()
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ValueError(f"regularization weight must be >= 0, got {self.lam}")
        if not np.all(np.isfinite(self.mean_scales)):
            raise ValueError("mean scales must be finite")


@dataclass
class STSolution:
    a: np.ndarray
    b: np.ndarray
    q: np.ndarray
    residual: float
    p0: int = 0

    def to_dict(self) -> dict:
        return {
            "p0": self.p0,
            "residual": self.residual,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "q": self.q.tolist(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "STSolution":
        return cls(np.asarray(d["a"], dtype=np.float64), np.asarray(d["b"], dtype=np.float64).reshape(-1, 3),
                   np.asarray(d["q"], dtype=np.float64).reshape(-1, 3), float(d["residual"]), int(d.get("p0", 0)))

    @classmethod
    def loads(cls, text: str) -> "STSolution":
        return cls.from_dict(json.loads(text))


def _as_triplets(r) -> np.ndarray:
    return r.y if isinstance(r, LandmarkTriplets) else np.asarray(r, dtype=np.float64)


def _reduced_system(t: ChartTriangulation, r: np.ndarray, p0: int):
    """Data rows with the pinned chart's columns eliminated: ``A x = c``."""
    sys_ = build_st_system(t, r, p0)
    f = t.c
    full = sys_.matrix[: 9 * f]
    pinned = np.arange(4 * p0, 4 * p0 + 4)
    keep = np.setdiff1d(np.arange(full.shape[1]), pinned)
    c = -full[:, pinned] @ np.array([1.0, 0.0, 0.0, 0.0])
    return full[:, keep], c, keep


def _expand(x_red: np.ndarray, keep: np.ndarray, n_cols: int, p0: int) -> np.ndarray:
    x = np.zeros(n_cols)
    x[keep] = x_red
    x[4 * p0] = 1.0
    return x


def _reg_terms(t: ChartTriangulation, keep: np.ndarray, p0: int, reg: RegularizerConfig | None):
    """Diagonal penalty and its right-hand side in reduced coordinates."""
    n = len(keep)
    diag = np.zeros(n)
    rhs = np.zeros(n)
    if reg is None or reg.lam == 0.0:
        return diag, rhs
    if len(reg.mean_scales) != t.c:
        raise ValueError(f"expected {t.c} mean scales, got {len(reg.mean_scales)}")
    pos = {int(col): i for i, col in enumerate(keep)}
    for p in range(t.c):
        if p == p0:
            continue
        i = pos[4 * p]
        diag[i] = reg.lam
        rhs[i] = reg.lam * reg.mean_scales[p]
    return diag, rhs


def _solve_reduced(t: ChartTriangulation, r: np.ndarray, p0: int, reg: RegularizerConfig | None):
    """Minimize ``|A x - c|^2 + penalty`` through an SVD of the stacked system.

    Forming the normal equations would square the condition number, which
    for badly shaped triplets costs several digits.
    """
    a_red, c, keep = _reduced_system(t, r, p0)
    diag, reg_rhs = _reg_terms(t, keep, p0, reg)
    rows = diag > 0
    aug = np.vstack([a_red, np.diag(np.sqrt(diag))[rows]])
    rhs = np.concatenate([c, reg_rhs[rows] / np.sqrt(diag[rows])])
    u, s, vt = np.linalg.svd(aug, full_matrices=False)
    if len(s) < aug.shape[1] or s[-1] <= TOL_RANK * s[0]:
        if len(s) < aug.shape[1]:
            vt = np.linalg.svd(aug)[2]
        flex = _expand(vt[-1], keep, 4 * t.c + 3 * t.n, p0)
        flex[4 * p0] = 0.0
        ratio = s[-1] / s[0] if len(s) == aug.shape[1] else 0.0
        raise STRecoveryError(f"scale/translation system is rank deficient "
                              f"(sigma_min/sigma_max = {ratio:.3e})", flex)
    x_red = vt.T @ ((u.T @ rhs) / s)
    return a_red, c, keep, diag, x_red


def solve_st(t: ChartTriangulation, r, p0: int = 0, reg: RegularizerConfig | None = None) -> STSolution:
    """Least-squares scales, translations and landmark embedding for triplets ``r``.

    Chart ``p0`` is pinned by eliminating its unknowns. Raises
    :class:`STRecoveryError` with a null direction when the system is singular.
    """
    r = _as_triplets(r)
    if not np.all(np.isfinite(r)):
        raise ValueError("landmark triplets contain non-finite values")
    if not 0 <= p0 < t.c:
        raise ValueError(f"fixed chart index {p0} out of range 0..{t.c - 1}")
    a_red, c, keep, _, x_red = _solve_reduced(t, r, p0, reg)
    resid = a_red @ x_red - c
    x = _expand(x_red, keep, 4 * t.c + 3 * t.n, p0)
    f = t.c
    ab = x[: 4 * f].reshape(f, 4)
    q = x[4 * f:].reshape(t.n, 3)
    return STSolution(ab[:, 0].copy(), ab[:, 1:].copy(), q, float(np.sqrt(np.mean(resid**2))), p0)


def _incidence(t: ChartTriangulation) -> np.ndarray:
    faces = np.asarray(t.faces)
    m = np.zeros((t.n, t.c * 3))
    m[faces.ravel(), np.arange(3 * t.c)] = 1.0
    deg = m.sum(axis=1, keepdims=True)
    if np.any(deg == 0):
        raise ValueError("landmark not used by any chart")
    return m / deg


def project_triplets(y, t: ChartTriangulation, p0: int = 0, reg: RegularizerConfig | None = None):
    """Consistent triplets closest in the chart-wise sense; returns ``(y_tilde, solution)``.

    Each triplet is mapped into the common frame, every landmark is replaced
    by the plain average over its incident charts, and the averages are
    mapped back.
    """
    y = _as_triplets(y)
    sol = solve_st(t, y, p0, reg)
    if np.any(np.abs(sol.a) < MIN_SCALE):
        bad = np.flatnonzero(np.abs(sol.a) < MIN_SCALE).tolist()
        raise STRecoveryError(f"recovered scale of charts {bad} is below {MIN_SCALE:g}")
    y_hat = sol.a[:, None, None] * y + sol.b[:, None, :]
    q_bar = _incidence(t) @ y_hat.reshape(-1, 3)
    faces = np.asarray(t.faces)
    y_tilde = (q_bar[faces] - sol.b[:, None, :]) / sol.a[:, None, None]
    return y_tilde, sol


def landmark_consistency(q: MultiChartTensor, t: ChartTriangulation, p0: int = 0,
                         reg: RegularizerConfig | None = None, seed: int | None = None) -> MultiChartTensor:
    """Make the tensor's landmark entries exactly consistent across charts.

    With ``seed`` set, the pinned chart is drawn at random from that seed
    (otherwise ``p0`` is used). Only anchor nodes change.
    """
    if q.n_charts != t.c:
        raise ValueError(f"tensor has {q.n_charts} charts, triangulation has {t.c} faces")
    if seed is not None:
        p0 = int(np.random.default_rng(seed).integers(t.c))
    y_tilde, _ = project_triplets(extract_landmarks(q), t, p0, reg)
    return write_landmarks(q, LandmarkTriplets(y_tilde))


def consistency_jacobian(y, t: ChartTriangulation, p0: int = 0, reg: RegularizerConfig | None = None) -> np.ndarray:
    """Jacobian of :func:`project_triplets` with respect to the flattened triplets.

    Obtained by differentiating the normal equations; shape ``(9c, 9c)``.
    """
    y = _as_triplets(y)
    f = t.c
    a_red, c, keep, diag, x_red = _solve_reduced(t, y, p0, reg)
    factor = sla.cho_factor(a_red.T @ a_red + np.diag(diag))
    rho = c - a_red @ x_red
    pos = {int(col): i for i, col in enumerate(keep)}
    n_red = len(keep)

    # y[P, s, d] sits in data row 9P + 3s + d, in the a_P column or the rhs for P0
    rhs = np.zeros((n_red, 9 * f))
    for e in range(9 * f):
        p = e // 9
        if p == p0:
            dc = np.zeros(9 * f)
            dc[e] = -1.0
            rhs[:, e] = a_red.T @ dc
        else:
            col = pos[4 * p]
            rhs[col, e] += rho[e]
            rhs[:, e] -= a_red[e] * x_red[col]
    dx_red = sla.cho_solve(factor, rhs)
    dx = np.zeros((4 * f + 3 * t.n, 9 * f))
    dx[keep] = dx_red

    x = _expand(x_red, keep, 4 * f + 3 * t.n, p0)
    ab = x[: 4 * f].reshape(f, 4)
    a, b = ab[:, 0], ab[:, 1:]
    da = dx[0: 4 * f: 4]  # (f, 9f)
    db = np.stack([dx[1 + d: 4 * f: 4] for d in range(3)], axis=1)  # (f, 3, 9f)

    eye = np.eye(9 * f).reshape(f, 3, 3, 9 * f)
    dy_hat = (da[:, None, None, :] * y[..., None] + a[:, None, None, None] * eye + db[:, None, :, :])
    inc = _incidence(t)
    y_hat = a[:, None, None] * y + b[:, None, :]
    q_bar = inc @ y_hat.reshape(-1, 3)
    dq_bar = np.einsum("lm,mdk->ldk", inc, dy_hat.reshape(3 * f, 3, 9 * f))
    faces = np.asarray(t.faces)
    num = q_bar[faces] - b[:, None, :]
    dnum = dq_bar[faces] - db[:, None, :, :]
    dy_tilde = dnum / a[:, None, None, None] - num[..., None] * da[:, None, None, :] / (a**2)[:, None, None, None]
    return dy_tilde.reshape(9 * f, 9 * f)


def zero_mean(q: MultiChartTensor) -> MultiChartTensor:
    """Subtract each chart's per-channel mean; constant channels become exactly zero."""
    d = q.data
    mean = d.mean(axis=(1, 2), keepdims=True)
    out = d - mean
    const = (d.max(axis=(1, 2), keepdims=True) == d.min(axis=(1, 2), keepdims=True))
    out = np.where(const, 0.0, out)
    return MultiChartTensor(out, q.means, q.norms)


def lambda_schedule(epoch: int, start: int = 50, hold_until: int = 500, value: float = 10.0,
                    factor: float = 0.995) -> float:
    """Weight of the scale regularizer at a training epoch (0 means the layer is off)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < start:
        return 0.0
    if epoch < hold_until:
        return float(value)
    return float(value * factor ** (epoch - hold_until))
