"""``modal-tune`` command line.

Exit status: 0 success, 1 invalid input (config, mesh, target, bindings),
2 usage error (unknown subcommand or flag), 3 numerical failure.
Diagnostics go to stderr; stdout carries the summary only.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import scipy.io
import scipy.linalg as la

from . import __version__
from .assembly import BindingError, ConstraintError, DomainError, build_system
from .config import ConfigError, arch_config_dict, load_config, load_problem
from .eigen import EigenSolverError, solve_smallest
from .fixtures import ARCH_TRUTH, arch_sensor_nodes, arch_space, sensor_dofs_of, synthetic_target
from .mesh import MeshError, arch_regions, build_arch_on_piers, dump_mesh
from .objective import TargetError, evaluate, target_to_dict
from .optimizer import blackbox_baseline, update
from .reports import metadata, result_to_dict, write_report, write_steps_csv, write_sweep_csv
from .rom import RomConsistencyError
from .sensitivity import jacobian, noise_sweep, svd_report

log = logging.getLogger("modal_tune")

SUBCOMMANDS = ("forward", "update", "sensitivity", "noise-sweep", "benchmark", "make-mesh")
INPUT_ERRORS = (ConfigError, MeshError, TargetError, BindingError, DomainError, ConstraintError,
                OSError, ValueError)
NUMERICAL_ERRORS = (EigenSolverError, RomConsistencyError, la.LinAlgError, FloatingPointError)


def _out_dir(args, config=None) -> Path:
    out = Path(args.out) if args.out else (config.out if config and config.out else Path("."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, config) -> int:
    return config.seed if args.seed is None else args.seed


def _fmt(values) -> str:
    return " ".join(f"{v:.6g}" for v in values)


# ---------------------------------------------------------------------------

def cmd_forward(args) -> int:
    config = load_config(args.config)
    problem = load_problem(config, need_target=False)
    q = problem.target.q if problem.target is not None else config.q
    x = problem.system.space.start
    sol = solve_smallest(problem.system, x, q, config.optimizer.eig_tol)
    out = _out_dir(args, config)
    result = {"x": x, "names": problem.system.space.names, "frequencies_hz": sol.frequencies,
              "eigenvalues": sol.eigenvalues, "residuals": sol.residuals,
              "n_dofs": problem.system.n_dofs, "n_free": problem.system.n_free,
              "modes": sol.vectors.T}
    if problem.target is not None:
        result["phi"] = evaluate(problem.target, sol.frequencies, sol.vectors).phi
    write_report(out / "forward.json", "forward", result, metadata())
    if args.export_matrices:
        # full pencil, constraint basis N and the reduced pencil N^T K N, N^T M N
        K, M = problem.system.parametric.instantiate(x)
        Kr, Mr = problem.system.instantiate(x)
        for name, mat in (("stiffness", K), ("mass", M), ("nullspace_basis", problem.system.basis),
                          ("reduced_stiffness", Kr), ("reduced_mass", Mr)):
            scipy.io.mmwrite(str(out / f"{name}.mtx"), mat)
    print(_fmt(sol.frequencies))
    return 0


def _print_result(res):
    print(f"{res.method}: {res.termination}, phi = {res.phi:.3e}, "
          f"rom builds = {res.rom_builds}, full solves = {res.full_solves}")
    for name, v in zip(res.names, res.x_opt):
        print(f"  {name} = {v:.8g}")


def cmd_update(args) -> int:
    config = load_config(args.config)
    problem = load_problem(config)
    res = update(problem.system, problem.target, config.optimizer)
    out = _out_dir(args, config)
    write_report(out / "update.json", "update", result_to_dict(res),
                 metadata(wall_time=res.wall_time))
    write_steps_csv(out / "iterations.csv", res)
    _print_result(res)
    return 0


def cmd_sensitivity(args) -> int:
    config = load_config(args.config)
    problem = load_problem(config)
    res = update(problem.system, problem.target, config.optimizer)
    J = jacobian(problem.system, problem.target, res.x_opt, res.solution,
                 pairing=config.optimizer.pairing)
    report = svd_report(J, res.x_opt, config.noise_level)
    out = _out_dir(args, config)
    doc = report.to_dict()
    doc.update({"names": problem.system.space.names, "x_opt": res.x_opt.tolist(),
                "jacobian": J.tolist(), "termination": res.termination})
    write_report(out / "sensitivity.json", "sensitivity", doc, metadata())
    print(f"kappa = {report.condition_number:.6g}")
    print(f"sigma = {_fmt(report.singular_values)}")
    return 0


def cmd_noise_sweep(args) -> int:
    config = load_config(args.config)
    problem = load_problem(config)
    clean = update(problem.system, problem.target, config.optimizer)
    if not clean.converged:
        log.warning("clean update did not converge (%s); errors are relative to its end point",
                    clean.termination)
    nopt = config.noise
    rows = noise_sweep(problem.system, problem.target, nopt.deltas, range(nopt.seeds),
                       config.optimizer, x_clean=clean.x_opt, mode_noise=nopt.mode_noise,
                       base_seed=_seed(args, config), threads=args.threads)
    out = _out_dir(args, config)
    write_sweep_csv(out / "sweep.csv", rows)
    for d in nopt.deltas:
        errs = [r.error for r in rows if r.delta == d and np.isfinite(r.error)]
        med = float(np.median(errs)) if errs else float("nan")
        print(f"delta = {d:.3g}: median error = {med:.3e} ({len(errs)}/{nopt.seeds} rows)")
    return 0


def cmd_benchmark(args) -> int:
    config = load_config(args.config)
    problem = load_problem(config)
    rom = update(problem.system, problem.target, config.optimizer)
    base = blackbox_baseline(problem.system, problem.target, config.optimizer)
    out = _out_dir(args, config)
    names = problem.system.space.names
    table = []
    for res in (rom, base):
        table.append({"method": res.method, "x_opt": res.x_opt.tolist(),
                      "frequencies_hz": res.solution.frequencies.tolist(), "phi": res.phi,
                      "termination": res.termination, "rom_builds": res.rom_builds,
                      "full_solves": res.full_solves})
    agreement = float(np.max(np.abs(rom.x_opt - base.x_opt) / np.abs(base.x_opt)))
    doc = {"names": names, "methods": table, "x_opt_relative_difference": agreement}
    write_report(out / "benchmark.json", "benchmark", doc,
                 metadata(wall_time={rom.method: rom.wall_time, base.method: base.wall_time}))
    print(f"{'method':<20}{'full solves':>12}{'wall [s]':>10}{'phi':>11}  x_opt")
    for res in (rom, base):
        print(f"{res.method:<20}{res.full_solves:>12d}{res.wall_time:>10.3f}{res.phi:>11.2e}  "
              + _fmt(res.x_opt))
    ratio = base.wall_time / rom.wall_time if rom.wall_time > 0 else float("inf")
    print(f"speedup {ratio:.2f}x, x_opt relative difference {agreement:.2e}")
    return 0


def cmd_make_mesh(args) -> int:
    if args.kind != "arch":
        raise ConfigError(f"unknown fixture {args.kind!r}; available: arch")
    out = _out_dir(args)
    mesh, constraints = build_arch_on_piers(refinement=args.refinement)
    regions = arch_regions()
    system = build_system(mesh, constraints, regions, arch_space())
    sensors = sensor_dofs_of(arch_sensor_nodes(mesh))
    target = synthetic_target(system, np.array(ARCH_TRUTH), sensors)
    (out / "arch_mesh.json").write_text(dump_mesh(mesh, constraints, regions) + "\n")
    (out / "arch_target.json").write_text(
        json.dumps(target_to_dict(target, "relative", 0.1), indent=1) + "\n")
    (out / "arch_config.json").write_text(
        json.dumps(arch_config_dict("arch_mesh.json", "arch_target.json"), indent=2) + "\n")
    print(f"arch fixture: {mesh.n_elements} elements, {mesh.n_nodes} nodes, "
          f"{system.n_free} free dofs -> {out}")
    return 0


COMMANDS = {"forward": cmd_forward, "update": cmd_update, "sensitivity": cmd_sensitivity,
            "noise-sweep": cmd_noise_sweep, "benchmark": cmd_benchmark, "make-mesh": cmd_make_mesh}


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: config 'out' or cwd)")
    common.add_argument("--seed", type=_u64, help="base seed for all randomness (overrides config)")
    common.add_argument("--threads", type=_positive, default=1, help="worker threads for sweeps")
    common.add_argument("--export-matrices", action="store_true",
                        help="also write K, M and the constraint basis (Matrix Market)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="modal-tune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    helps = {"forward": "frequencies and modes at the start point",
             "update": "trust-region model updating",
             "sensitivity": "scaled-Jacobian SVD at the optimum",
             "noise-sweep": "parameter error versus frequency noise",
             "benchmark": "trust region against the black-box baseline"}
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--config", required=True, help="run configuration (JSON)")
    p = sub.add_parser("make-mesh", parents=[common], help="write a fixture mesh, target and config")
    p.add_argument("kind", choices=["arch"])
    p.add_argument("--config", help="ignored; accepted for a uniform interface")
    p.add_argument("--refinement", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else (logging.INFO if args.verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except NUMERICAL_ERRORS as exc:
        print(f"modal-tune: numerical failure: {exc}", file=sys.stderr)
        return 3
    except INPUT_ERRORS as exc:
        print(f"modal-tune: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
