"""Command line interface.

Exit codes: 0 success, 1 negative analysis result (structure not rigid),
2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fixtures
from .flatten import area_scale, coverage_report, save_chart
from .graph import certify, genericity_test, load_triangulation, save_triangulation
from .mesh import write_landmarks, write_obj
from .pipeline import (EXIT_NEGATIVE, EXIT_OK, EXIT_USAGE, PipelineConfig, StageError, _require, _stage,
                       build_template, load_inputs, reconstruct, roundtrip, tensorize)
from .recovery import lambda_schedule
from .tensorize import dump_csv

PROG = "multichart"


def _add_inputs(p, mesh=True):
    if mesh:
        p.add_argument("--mesh", help="input surface (OBJ)")
    p.add_argument("--landmarks", help="landmark vertex indices, one 0-based index per line")
    p.add_argument("--structure", help="chart triangulation file")


def _add_knobs(p):
    p.add_argument("--config", help="JSON config file; command line flags override it")
    p.add_argument("--k", type=int, help="grid resolution, odd (default 65)")
    p.add_argument("--delta", type=float, help="coverage threshold on the area scale (default 0.1)")
    p.add_argument("--p0", type=int, help="index of the pinned chart (default 0)")
    p.add_argument("--seed", type=int, help="draw the pinned chart at random from this seed")
    p.add_argument("--lambda", dest="lam", type=float, help="scale regularization weight")
    p.add_argument("--epoch", type=int, help="take the regularization weight from the training schedule")
    p.add_argument("--symmetry", choices=["average", "max", "none"], help="orbit projection before recovery")
    p.add_argument("--no-pin-landmarks", dest="pin_landmarks", action="store_const", const=False,
                   help="blend landmark vertices like any other vertex")
    p.add_argument("--jobs", type=int, help="worker threads for per-chart work (default: all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Multi-chart flat-torus tensors of sphere-type meshes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rigidity", help="certify that a chart structure determines scales and translations")
    p.add_argument("--structure", required=True)
    p.add_argument("--trials", type=int, default=20, help="random landmark draws for the rank test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p0", type=int, default=0)
    p.add_argument("--out", help="write the certificate (JSON) here")

    p = sub.add_parser("flatten", help="compute charts, per-vertex scale fields and coverage")
    _add_inputs(p)
    _add_knobs(p)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("tensorize", help="sample and normalize the multi-chart tensor")
    _add_inputs(p)
    _add_knobs(p)
    p.add_argument("--out", required=True, help="tensor file to write")
    p.add_argument("--dump-csv", metavar="DIR", help="also write one CSV per chart")

    p = sub.add_parser("reconstruct", help="reconstruct a mesh from a tensor by template fitting")
    p.add_argument("--tensor", help="tensor file")
    p.add_argument("--template", help="template mesh (OBJ)")
    _add_inputs(p, mesh=False)
    _add_knobs(p)
    p.add_argument("--out", required=True, help="OBJ file to write")
    p.add_argument("--solution", help="also write the recovered scales/translations (JSON)")

    p = sub.add_parser("roundtrip", help="tensorize a mesh and reconstruct it with itself as template")
    _add_inputs(p)
    _add_knobs(p)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("lambda-schedule", help="print the regularization weight per epoch")
    p.add_argument("epochs", type=int, nargs="+")
    p.add_argument("--start", type=int, default=50)
    p.add_argument("--hold-until", type=int, default=500)
    p.add_argument("--value", type=float, default=10.0)
    p.add_argument("--factor", type=float, default=0.995)

    p = sub.add_parser("fixtures", help="write the bundled test surfaces and structures")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--level", type=int, default=3, help="subdivision level of the surfaces")
    return parser


_CONFIG_KEYS = ("mesh", "landmarks", "structure", "template", "tensor", "k", "delta", "p0", "seed", "lam",
                "epoch", "symmetry", "pin_landmarks", "jobs")


def config_from_args(args) -> PipelineConfig:
    overrides = {k: getattr(args, k, None) for k in _CONFIG_KEYS}
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = args.out_dir
    with _stage("config", input_stage=True):
        if getattr(args, "config", None):
            return PipelineConfig.from_file(_require(args.config, "config file"), **overrides)
        return PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})


def _write(path, data: bytes) -> None:
    with _stage("write", input_stage=True):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)


def cmd_rigidity(args) -> int:
    path = _require(args.structure, "structure file")
    with _stage("load", input_stage=True):
        t = load_triangulation(path)
    with _stage("rigidity"):
        cert = certify(t, trials=args.trials, seed=args.seed, p0=args.p0)
        gen = genericity_test(t, trials=args.trials, seed=args.seed, p0=args.p0)
    print(f"{path.name}: {cert.verdict} via {cert.method} ({cert.reason})")
    print(f"rank test on {gen.trials} random landmark draws: {gen.passes} full rank -> {gen.verdict}")
    if cert.flex is not None and not cert.rigid:
        print("flex direction: " + " ".join(f"{v:.6g}" for v in cert.flex))
    if args.out:
        _write(args.out, cert.dumps().encode("utf-8"))
    return EXIT_OK if cert.rigid else EXIT_NEGATIVE


def cmd_flatten(args) -> int:
    cfg = config_from_args(args)
    m, lm, t = load_inputs(cfg)
    tmpl, _ = build_template(m, lm, t, cfg)
    out = Path(cfg.out_dir)
    with _stage("write", input_stage=True):
        out.mkdir(parents=True, exist_ok=True)
        for p, ch in enumerate(tmpl.charts):
            save_chart(ch, out / f"chart_{p:02d}.mcfc")
            sf = area_scale(ch)
            np.savetxt(out / f"scale_{p:02d}.txt", sf.values, fmt="%.17g")
        cov = coverage_report(tmpl.charts, cfg.delta)
        np.savetxt(out / "scale_max.txt", cov.max_scale, fmt="%.17g")
        (out / "coverage.json").write_text(json.dumps(cov.summary(), indent=2, sort_keys=True) + "\n")
    print(f"{t.c} charts written to {out}; coverage at delta={cfg.delta}: {cov.fraction:.4f}")
    return EXIT_OK


def cmd_tensorize(args) -> int:
    cfg = config_from_args(args)
    m, lm, t = load_inputs(cfg)
    data, nt, _, _ = tensorize(m, lm, t, cfg)
    _write(args.out, data)
    if args.dump_csv:
        with _stage("write", input_stage=True):
            dump_csv(nt, args.dump_csv)
    print(f"tensor {nt.n_charts} x {nt.k} x {nt.k} x 3 written to {args.out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = config_from_args(args)
    tensor_path = _require(cfg.tensor, "tensor file")
    m, lm, t = load_inputs(cfg, mesh_key="template")
    tmpl, transform = build_template(m, lm, t, cfg)
    rec = reconstruct(tensor_path.read_bytes(), tmpl, transform, cfg)
    _write(args.out, rec.obj_bytes)
    if args.solution:
        _write(args.solution, rec.solution.dumps().encode("utf-8"))
    print(f"reconstructed {rec.result.mesh.n_vertices} vertices (pinned chart {rec.p0}) -> {args.out}")
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    cfg = config_from_args(args)
    m, lm, t = load_inputs(cfg)
    rt = roundtrip(m, lm, t, cfg)
    out = Path(cfg.out_dir)
    _write(out / "tensor.mct", rt.tensor_bytes)
    _write(out / "reconstruction.obj", rt.obj_bytes)
    _write(out / "report.json", rt.report_bytes())
    e = rt.report["errors"]
    print(f"mean vertex error {e['mean_vertex_error_rel']:.4%} of bbox diagonal, "
          f"max {e['max_vertex_error_rel']:.4%}, landmark error {e['landmark_error']:.3e}, "
          f"coverage {rt.report['coverage']['coverage_fraction']:.4f} at delta={cfg.delta}")
    return EXIT_OK


def cmd_lambda_schedule(args) -> int:
    for e in args.epochs:
        print(f"{e} {lambda_schedule(e, args.start, args.hold_until, args.value, args.factor)!r}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    out = Path(args.out_dir)
    with _stage("write", input_stage=True):
        out.mkdir(parents=True, exist_ok=True)
        bumpy = fixtures.bumpy_sphere(args.level)
        write_obj(bumpy, out / "bumpy.obj", ["bumpy sphere fixture"])
        write_landmarks(fixtures.human_landmarks(bumpy), out / "bumpy_human.lmk", "21 body-style landmarks")
        write_landmarks(fixtures.tetra_landmarks(bumpy), out / "bumpy_tetra.lmk", "4 tetrahedral landmarks")
        ico = fixtures.icosphere(args.level)
        write_obj(ico, out / "icosphere.obj", [f"icosphere level {args.level}"])
        write_landmarks(fixtures.tetra_landmarks(ico), out / "icosphere_tetra.lmk", "4 tetrahedral landmarks")
        for name in fixtures.TRIANGULATIONS:
            save_triangulation(fixtures.load_fixture_triangulation(name), out / f"{name}.tri")
    print(f"fixtures written to {out}")
    return EXIT_OK


COMMANDS = {
    "rigidity": cmd_rigidity,
    "flatten": cmd_flatten,
    "tensorize": cmd_tensorize,
    "reconstruct": cmd_reconstruct,
    "roundtrip": cmd_roundtrip,
    "lambda-schedule": cmd_lambda_schedule,
    "fixtures": cmd_fixtures,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
