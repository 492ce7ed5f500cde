"""Command-line interface: ``micarray-calib <command> ...``.

Exit status is 0 on success (including a NOT OBSERVABLE verdict), 1 for
usage or input-file errors and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundled import FIGURES, bundled_path
from .calibrate import CalibrationProblem, SolverOptions, covariance_from_fim, initial_guess_builder, solve
from .errors import InvalidConfig, MicArrayError, SingularFIM, SolverError
from .io import (
    dumps,
    load_measurements,
    load_scenario,
    save_measurements,
    save_state,
    scenario_from_dict,
    sha256_file,
    write_csv,
    write_matrix_csv,
)
from .jacobian import StateVector, assemble, fim, jacobian_at, parameter_names, whiten
from .observability import RankReport, rank_trace
from .scenario import synthesize

OUT_ENV = "MICARRAY_CALIB_OUT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RANK_HEADER = ("step", "rank", "g2", "deficit", "full_rank_flag", "rank_F")

log = logging.getLogger("micarray_calib")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers

class ScenarioSource:
    """A scenario given as a file path or as ``bundled:NAME``."""

    def __init__(self, spec: str):
        self.spec = spec
        if spec.startswith("bundled:"):
            ref = bundled_path(spec.split(":", 1)[1])
            self.data = ref.read_bytes()
            self.scenario, self.noise = scenario_from_dict(json.loads(self.data), spec)
        else:
            self.data = Path(spec).read_bytes() if Path(spec).is_file() else None
            self.scenario, self.noise = load_scenario(spec)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


class Output:
    """Collects output files, refuses to overwrite unless ``force``."""

    def __init__(self, directory: Path, force: bool):
        self.dir = directory
        self.force = force
        self.files: list[str] = []

    def claim(self, *names: str) -> None:
        if not self.force:
            clash = [n for n in names if (self.dir / n).exists()]
            if clash:
                raise UsageError(f"refusing to overwrite {', '.join(str(self.dir / n) for n in clash)}"
                                 " (use --force)")
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text)


def _manifest(out: Output, args, inputs: dict[str, str], seed) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "force")}
    out.write_text("manifest.json", dumps({
        "command": args.command,
        "version": __version__,
        "seed": seed,
        "flags": flags,
        "inputs": inputs,
        "outputs": sorted(out.files),
    }))


def _write_rank_trace(out: Output, name: str, report: RankReport) -> None:
    write_csv(out.path(name), RANK_HEADER, report.rows())


def _solver_options(args) -> SolverOptions:
    return SolverOptions(damping=args.damping, gtol=args.gtol, xtol=args.xtol,
                         max_iter=args.max_iter, rank_tol=args.rank_tol)


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    ref = ScenarioSource(args.scenario)
    seed = ref.scenario.seed if args.seed is None else args.seed
    out = Output(args.out, args.force)
    out.claim("measurements.json", "manifest.json")
    ms = synthesize(ref.scenario, None if args.noise_free else ref.noise, seed)
    save_measurements(out.path("measurements.json"), ms)
    _manifest(out, args, {args.scenario: ref.sha256}, seed)
    print(f"wrote {ms.n_steps} steps for {ms.n_arrays} arrays to {out.dir}")
    return EXIT_OK


def cmd_rank_trace(args) -> int:
    ref = ScenarioSource(args.scenario)
    sc = ref.scenario
    out = Output(args.out, args.force)
    names = ["rank_trace.csv", "rank_report.json", "manifest.json"]
    if args.dump_matrices:
        names += ["jacobian.csv", "fim.csv", "singular_values.csv"]
    out.claim(*names)
    report = rank_trace(sc, args.rank_tol)
    _write_rank_trace(out, "rank_trace.csv", report)
    out.write_text("rank_report.json", dumps(report.as_dict()))
    if args.dump_matrices:
        bundle = assemble(sc)
        write_matrix_csv(out.path("jacobian.csv"), bundle.J)
        write_matrix_csv(out.path("fim.csv"), fim(bundle, ref.noise))
        s = np.linalg.svd(whiten(bundle.J, ref.noise, sc.n_steps), compute_uv=False)
        write_csv(out.path("singular_values.csv"), ("index", "singular_value"),
                  [(i, v) for i, v in enumerate(s, start=1)])
    _manifest(out, args, {args.scenario: ref.sha256}, sc.seed)
    for row in report.rows():
        print("step={} rank={} g2={} deficit={} full_rank={}".format(*row[:5]))
    return EXIT_OK


def check_report(label: str, report: RankReport) -> tuple[str, dict]:
    """Human-readable text and JSON verdict for a rank report."""
    observable = report.full_column_rank
    K = int(report.steps[-1])
    g2 = int(report.g2[-1])
    rank = int(report.rank[-1])
    lines = [
        f"scenario: {label} (N={report.n_arrays}, K={K})",
        f"verdict: {'OBSERVABLE' if observable else 'NOT OBSERVABLE'}",
        f"Jacobian rank {rank} of {g2} columns (deficit {int(report.deficit[-1])})",
    ]
    if report.first_full_rank_step is not None:
        lines.append(f"full column rank from step {report.first_full_rank_step}")
    lines.append(f"rank(Tbar) = {report.rank_Tbar} (needs 3)")
    low = {i: r for i, r in report.rank_Lbar.items() if r < 8}
    lines.append("rank(Lbar_i) = 8 for every array" if not low else
                 "rank(Lbar_i) < 8 for arrays " + ", ".join(f"{i} ({r})" for i, r in low.items()))
    suff = report.sufficiency
    if suff is not None:
        lines.append(f"sufficient condition holds with M_{suff.witness}T" if suff.sufficient
                     else "sufficient condition not met")
    if report.violated_conditions:
        lines.append("conditions:")
        lines += [f"  - {c.code}: {c.message}" for c in report.violated_conditions]
    else:
        lines.append("conditions: none flagged")
    verdict = {
        "scenario": label,
        "observable": observable,
        "verdict": "OBSERVABLE" if observable else "NOT OBSERVABLE",
        "rank": rank,
        "g2": g2,
        "deficit": int(report.deficit[-1]),
        "first_full_rank_step": report.first_full_rank_step,
        "violated_conditions": [c.as_dict() for c in report.violated_conditions],
        "sufficiency": None if suff is None else suff.as_dict(),
    }
    return "\n".join(lines) + "\n", verdict


def cmd_check(args) -> int:
    ref = ScenarioSource(args.scenario)
    out = Output(args.out, args.force)
    out.claim("check.txt", "verdict.json", "manifest.json")
    text, verdict = check_report(args.scenario, rank_trace(ref.scenario, args.rank_tol))
    out.write_text("check.txt", text)
    out.write_text("verdict.json", dumps(verdict))
    _manifest(out, args, {args.scenario: ref.sha256}, ref.scenario.seed)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    ref = ScenarioSource(args.scenario)
    sc = ref.scenario
    seed = sc.seed if args.seed is None else args.seed
    out = Output(args.out, args.force)
    out.claim("estimate.json", "convergence.csv", "covariance.csv", "rank_trace.csv",
              "calibration.json", "manifest.json")
    inputs = {args.scenario: ref.sha256}
    if args.measurements:
        ms = load_measurements(args.measurements)
        inputs[args.measurements] = sha256_file(args.measurements)
    else:
        ms = synthesize(sc, None if args.noise_free else ref.noise, seed)
    if (ms.n_arrays, ms.n_steps) != (sc.n_arrays, sc.n_steps):
        raise InvalidConfig(f"measurements are for N={ms.n_arrays}, K={ms.n_steps}; "
                            f"scenario has N={sc.n_arrays}, K={sc.n_steps}")
    if args.init == "file":
        if not args.init_file:
            raise UsageError("--init file requires --init-file")
        inputs[args.init_file] = sha256_file(args.init_file)
    x0 = initial_guess_builder(ms, args.init, truth=StateVector.from_scenario(sc), seed=args.init_seed,
                               start=sc.trajectory[0] if args.init == "dead_reckoning" else (0, 0, 0),
                               path=args.init_file)
    prob = CalibrationProblem.from_scenario(sc, ms, ref.noise, x0)
    failure = None
    try:
        result = solve(prob, _solver_options(args))
    except SolverError as exc:
        if exc.result is None:
            raise
        result, failure = exc.result, exc
    save_state(out.path("estimate.json"), result.estimate)
    write_csv(out.path("convergence.csv"), ("iteration", "cost", "damping", "gradient_norm"),
              [(h.iteration, h.cost, h.damping, h.gradient_norm) for h in result.history])
    if result.covariance is not None:
        write_matrix_csv(out.path("covariance.csv"), result.covariance)
    _write_rank_trace(out, "rank_trace.csv", result.rank_report)
    truth = StateVector.from_scenario(sc).to_vector()
    summary = {
        "status": result.status,
        "converged": result.converged,
        "iterations": result.iterations,
        "final_cost": result.final_cost,
        "gradient_norm": result.gradient_norm,
        "max_abs_error_vs_scenario": float(np.max(np.abs(result.estimate.to_vector() - truth))),
        "full_column_rank": result.rank_report.full_column_rank,
        "error": None if failure is None else str(failure),
    }
    out.write_text("calibration.json", dumps(summary))
    _manifest(out, args, inputs, seed)
    print(f"status={result.status} iterations={result.iterations} cost={result.final_cost:.6g} "
          f"gradient_norm={result.gradient_norm:.3g}")
    if failure is not None:
        print(f"error: {failure}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_crlb(args) -> int:
    ref = ScenarioSource(args.scenario)
    sc = ref.scenario
    out = Output(args.out, args.force)
    out.claim("crlb_covariance.csv", "crlb_std.csv", "manifest.json")
    bundle = jacobian_at(StateVector.from_scenario(sc), sc.dt, sc.c)
    try:
        cov = covariance_from_fim(bundle, ref.noise, args.rank_tol)
    except SingularFIM as exc:
        names = parameter_names(sc.n_arrays, sc.n_steps)
        top = np.argsort(-np.abs(exc.null_space[:, 0]))[:4]
        print("largest null-direction components: " + ", ".join(names[i] for i in top), file=sys.stderr)
        raise
    write_matrix_csv(out.path("crlb_covariance.csv"), cov)
    std = np.sqrt(np.diag(cov))
    write_csv(out.path("crlb_std.csv"), ("parameter", "std"),
              zip(parameter_names(sc.n_arrays, sc.n_steps), std))
    _manifest(out, args, {args.scenario: ref.sha256}, sc.seed)
    print(f"CRLB for {cov.shape[0]} parameters written to {out.dir}")
    return EXIT_OK


def cmd_repro_fig(args) -> int:
    out = Output(args.out, args.force)
    names = FIGURES[args.figure]
    out.claim(*[f"{args.figure}_{n}.csv" for n in names], f"{args.figure}.json", "manifest.json")
    inputs, summary = {}, {}
    for name in names:
        ref = ScenarioSource(f"bundled:{name}")
        inputs[ref.spec] = ref.sha256
        report = rank_trace(ref.scenario, args.rank_tol)
        _write_rank_trace(out, f"{args.figure}_{name}.csv", report)
        _, summary[name] = check_report(ref.spec, report)
        print(f"{name}: deficit by step {[int(d) for d in report.deficit]}")
    out.write_text(f"{args.figure}.json", dumps(summary))
    _manifest(out, args, inputs, None)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=Path(os.environ.get(OUT_ENV, "out")),
                        help=f"output directory (default: ${OUT_ENV} or ./out)")
    common.add_argument("--force", action="store_true", help="overwrite existing output files")
    common.add_argument("--rank-tol", type=float, default=None,
                        help="absolute singular-value threshold for numerical rank")

    scen = argparse.ArgumentParser(add_help=False)
    scen.add_argument("scenario", help="scenario JSON file or bundled:NAME")

    p = _Parser(prog="micarray-calib", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[scen, common], help="synthesize measurements")
    s.add_argument("--seed", type=int, default=None, help="noise seed (default: scenario seed)")
    s.add_argument("--noise-free", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("rank-trace", parents=[scen, common], help="Jacobian rank after each step")
    s.add_argument("--dump-matrices", action="store_true", help="also write J, FIM and singular values")
    s.set_defaults(func=cmd_rank_trace)

    s = sub.add_parser("check", parents=[scen, common], help="observability verdict")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("calibrate", parents=[scen, common], help="estimate extrinsics and trajectory")
    s.add_argument("--measurements", help="measurement file (default: synthesize from the scenario)")
    s.add_argument("--seed", type=int, default=None, help="noise seed when synthesizing")
    s.add_argument("--noise-free", action="store_true")
    s.add_argument("--init", choices=("truth_plus_noise", "dead_reckoning", "file"),
                   default="truth_plus_noise")
    s.add_argument("--init-file", help="state file for --init file")
    s.add_argument("--init-seed", type=int, default=0)
    d = SolverOptions()
    s.add_argument("--max-iter", type=int, default=d.max_iter)
    s.add_argument("--gtol", type=float, default=d.gtol)
    s.add_argument("--xtol", type=float, default=d.xtol)
    s.add_argument("--damping", type=float, default=d.damping)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("crlb", parents=[scen, common], help="Cramer-Rao bound at the scenario truth")
    s.set_defaults(func=cmd_crlb)

    s = sub.add_parser("repro-fig", parents=[common], help="rank traces for a bundled figure group")
    s.add_argument("figure", choices=sorted(FIGURES))
    s.set_defaults(func=cmd_repro_fig)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    del args.verbose
    try:
        return args.func(args)
    except (UsageError, InvalidConfig) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MicArrayError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
