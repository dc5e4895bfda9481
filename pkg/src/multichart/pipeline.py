"""End-to-end orchestration: mesh -> charts -> tensor -> reconstruction.

Every stage raises :class:`StageError` carrying the stage name and the exit
code the command line should use (2 for input problems, 3 for numerical
failures).
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flatten import FlattenError, coverage_report
from .graph import ChartTriangulation, TriangulationError, load_triangulation
from .mesh import AlignmentTransform, LandmarkSet, Mesh, MeshError, fit_similarity, load_landmarks, load_obj, \
    normalize_mesh
from .reconstruct import ReconstructedMesh, ReconstructionError, Template, landmark_pins, recover_charts, \
    template_fit
from .recovery import RegularizerConfig, STRecoveryError, STSolution, landmark_consistency, lambda_schedule
from .tensorize import MultiChartTensor, SamplingError, normalize_tensor, sample_chart, symmetry_project, \
    tensor_from_bytes, tensor_to_bytes

EXIT_OK = 0
EXIT_NEGATIVE = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

NUMERICAL_ERRORS = (FlattenError, SamplingError, STRecoveryError, ReconstructionError, np.linalg.LinAlgError,
                    FloatingPointError)
INPUT_ERRORS = (OSError, MeshError, TriangulationError, json.JSONDecodeError)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, code: int = EXIT_NUMERICAL):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.code = code


class _stage:
    """Context manager that tags any failure with the stage name."""

    def __init__(self, name: str, input_stage: bool = False):
        self.name = name
        self.input_stage = input_stage

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is None or isinstance(exc, StageError):
            return False
        if isinstance(exc, INPUT_ERRORS) or (self.input_stage and isinstance(exc, (ValueError, KeyError))):
            raise StageError(self.name, str(exc), EXIT_USAGE) from exc
        if isinstance(exc, NUMERICAL_ERRORS + (ValueError,)):
            raise StageError(self.name, str(exc), EXIT_NUMERICAL) from exc
        return False


@dataclass
class PipelineConfig:
    """Inputs and knobs of the pipeline; paths may be ``None`` for stages that do not need them.

    ``lam`` is the scale-regularization weight used by the consistency
    projection (``None`` leaves it off); ``epoch`` selects it from the
    training schedule instead when given.
    """

    mesh: str | None = None
    landmarks: str | None = None
    structure: str | None = None
    template: str | None = None
    tensor: str | None = None
    out_dir: str = "out"
    k: int = 65
    delta: float = 0.1
    p0: int = 0
    seed: int | None = None
    lam: float | None = None
    epoch: int | None = None
    schedule_start: int = 50
    schedule_hold_until: int = 500
    schedule_value: float = 10.0
    schedule_factor: float = 0.995
    mean_scales: list | None = None
    symmetry: str = "average"
    pin_landmarks: bool = True
    min_weight: float = 1e-3
    jobs: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.k < 3 or self.k % 2 == 0:
            raise ValueError(f"k must be odd and >= 3, got {self.k}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.p0 < 0:
            raise ValueError(f"p0 must be >= 0, got {self.p0}")
        if self.symmetry not in ("average", "max", "none"):
            raise ValueError(f"symmetry must be average, max or none, got {self.symmetry!r}")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def n_jobs(self) -> int:
        return self.jobs if self.jobs else (os.cpu_count() or 1)

    def regularization_weight(self) -> float:
        if self.epoch is not None:
            return lambda_schedule(self.epoch, self.schedule_start, self.schedule_hold_until,
                                   self.schedule_value, self.schedule_factor)
        return self.lam or 0.0


def _require(path, what: str) -> Path:
    if path is None:
        raise StageError("load", f"no {what} given", EXIT_USAGE)
    p = Path(path)
    if not p.is_file():
        raise StageError("load", f"{what} not found: {p}", EXIT_USAGE)
    return p


def load_inputs(cfg: PipelineConfig, mesh_key: str = "mesh") -> tuple[Mesh, LandmarkSet, ChartTriangulation]:
    mesh_path = _require(getattr(cfg, mesh_key), mesh_key + " file")
    lm_path = _require(cfg.landmarks, "landmark file")
    st_path = _require(cfg.structure, "structure file")
    with _stage("load", input_stage=True):
        m = load_obj(mesh_path)
        lm = load_landmarks(lm_path).check(m)
        t = load_triangulation(st_path)
        if len(lm) != t.n:
            raise ValueError(f"structure has {t.n} landmarks but {lm_path} lists {len(lm)}")
        if not 0 <= cfg.p0 < t.c:
            raise ValueError(f"p0={cfg.p0} out of range for {t.c} charts")
    return m, lm, t


def build_template(m: Mesh, lm: LandmarkSet, t: ChartTriangulation, cfg: PipelineConfig):
    """Normalize the mesh to unit area and compute one chart per structure face."""
    with _stage("flatten"):
        mn, transform = normalize_mesh(m)
        tmpl = Template.build(mn, t, lm, jobs=cfg.n_jobs, min_weight=cfg.min_weight)
    return tmpl, transform


def sample_template(tmpl: Template, k: int, jobs: int = 1) -> MultiChartTensor:
    with _stage("tensorize"):
        def one(p):
            return sample_chart(tmpl.charts[p], k, chart_id=p)

        idx = range(len(tmpl.charts))
        if jobs > 1:
            with ThreadPoolExecutor(jobs) as ex:
                charts = list(ex.map(one, idx))
        else:
            charts = [one(p) for p in idx]
        return MultiChartTensor.from_charts(charts)


def tensorize(m: Mesh, lm: LandmarkSet, t: ChartTriangulation, cfg: PipelineConfig):
    """Returns ``(tensor_bytes, normalized tensor, template, mesh transform)``."""
    tmpl, transform = build_template(m, lm, t, cfg)
    raw = sample_template(tmpl, cfg.k, cfg.n_jobs)
    with _stage("normalize"):
        nt = normalize_tensor(raw)
    return tensor_to_bytes(nt), nt, tmpl, transform


def _regularizer(cfg: PipelineConfig, q: MultiChartTensor, p0: int) -> RegularizerConfig | None:
    lam = cfg.regularization_weight()
    if lam == 0.0:
        return None
    if cfg.mean_scales is not None:
        scales = np.asarray(cfg.mean_scales, dtype=np.float64)
    elif q.normalized:
        # scales that undo the per-chart normalization relative to the pinned chart
        scales = q.norms / q.norms[p0]
    else:
        raise StageError("consistency", "regularization needs mean scales or a normalized tensor", EXIT_USAGE)
    return RegularizerConfig(lam, scales)


@dataclass
class Reconstruction:
    result: ReconstructedMesh
    solution: STSolution
    p0: int
    obj_bytes: bytes


def reconstruct(tensor_bytes: bytes, tmpl: Template, transform: AlignmentTransform,
                cfg: PipelineConfig) -> Reconstruction:
    """Consistency projection, gauge recovery and template fit of a serialized tensor.

    The output is expressed in the template's input coordinates when the
    tensor carries normalization records.
    """
    t = tmpl.structure
    with _stage("load", input_stage=True):
        q = tensor_from_bytes(tensor_bytes)
        if q.n_charts != t.c:
            raise ValueError(f"tensor has {q.n_charts} charts but the structure has {t.c}")
    p0 = cfg.p0
    if cfg.seed is not None:
        p0 = int(np.random.default_rng(cfg.seed).integers(t.c))
    with _stage("consistency"):
        if cfg.symmetry != "none":
            q = symmetry_project(q, cfg.symmetry)
        q = landmark_consistency(q, t, p0, _regularizer(cfg, q, p0))
    with _stage("recover"):
        q_hat, sol = recover_charts(q, t, p0)
    with _stage("reconstruct"):
        r = template_fit(q_hat, tmpl, landmark_pins(tmpl, sol) if cfg.pin_landmarks else None)
        pos = r.mesh.vertices
        if q.normalized:
            pos = q.norms[p0] * pos + q.means[p0]
            pos = (pos - transform.translation) / transform.scale @ transform.rotation
        r = ReconstructedMesh(r.mesh.with_vertices(pos), r.dominant_chart)
        buf = io.StringIO()
        comments = [f"reconstructed mesh: {r.mesh.n_vertices} vertices, {r.mesh.n_faces} faces"]
        comments += [f"chart {v} {int(c)}" for v, c in enumerate(r.dominant_chart)]
        buf.write("".join(f"# {c}\n" for c in comments))
        buf.write("".join("v %.17g %.17g %.17g\n" % tuple(p) for p in r.mesh.vertices))
        buf.write("".join("f %d %d %d\n" % tuple(f + 1) for f in r.mesh.faces))
    return Reconstruction(r, sol, p0, buf.getvalue().encode("utf-8"))


def error_metrics(recon: Mesh, truth: Mesh, landmarks: LandmarkSet) -> dict:
    """Errors after the scale+translation fit of the landmarks (the gauge the pipeline cannot see)."""
    idx = list(landmarks.indices)
    sigma, tau, _ = fit_similarity(recon.vertices[idx], truth.vertices[idx])
    err = np.linalg.norm(sigma * recon.vertices + tau - truth.vertices, axis=1)
    diag = truth.bbox_diagonal()
    return {
        "bbox_diagonal": diag,
        "mean_vertex_error": float(err.mean()),
        "max_vertex_error": float(err.max()),
        "mean_vertex_error_rel": float(err.mean() / diag),
        "max_vertex_error_rel": float(err.max() / diag),
        "landmark_error": float(err[idx].max()),
        "fit_scale": sigma,
    }


@dataclass
class RoundTrip:
    tensor_bytes: bytes
    obj_bytes: bytes
    report: dict

    def report_bytes(self) -> bytes:
        return (json.dumps(self.report, indent=2, sort_keys=True) + "\n").encode("utf-8")


def roundtrip(m: Mesh, lm: LandmarkSet, t: ChartTriangulation, cfg: PipelineConfig) -> RoundTrip:
    """Tensorize the mesh and reconstruct it with itself as template; report the errors."""
    tensor_bytes, _, tmpl, transform = tensorize(m, lm, t, cfg)
    rec = reconstruct(tensor_bytes, tmpl, transform, cfg)
    with _stage("report"):
        cov = coverage_report(tmpl.charts, cfg.delta)
        report = {
            "mesh": {"vertices": m.n_vertices, "faces": m.n_faces},
            "charts": t.c,
            "k": cfg.k,
            "p0": rec.p0,
            "st_residual": rec.solution.residual,
            "coverage": cov.summary(),
            "errors": error_metrics(rec.result.mesh, m, lm),
        }
    return RoundTrip(tensor_bytes, rec.obj_bytes, report)
