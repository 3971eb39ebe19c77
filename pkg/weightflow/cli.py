import os
import sys
import json
import logging
import argparse
from pathlib import Path

from pydantic import BaseModel, ValidationError

logger = logging.getLogger(__name__)

LOG_LEVEL = os.environ.get("WF_LOGLEVEL", "INFO").upper()
logging.basicConfig(
    level=LOG_LEVEL,
    format="%(message)s",
)

COMMANDS = ("grade-dag", "hn", "weight", "iterate", "simulate", "asymptotic", "fit", "verify")
VERIFIABLE = ("grading", "hn", "weight", "iterate", "simulate", "asymptotic", "fit")
METHODS = ("RK45", "DOP853", "Radau", "BDF", "LSODA")
PATH_OPTIONS = ("input", "output", "command", "schema", "meta")


def _positive_float(value):
    x = float(value)
    if not x > 0:
        raise argparse.ArgumentTypeError("expected a positive number, got {}".format(value))
    return x


def _add_input(parser):
    parser.add_argument("input", type=str, nargs="?", help="Input document")
    parser.add_argument("-o", "--output", type=str, help="Write the result here instead of stdout")
    parser.add_argument(
        "--schema",
        action="store_true",
        help="Print the JSON schema of the input document and exit",
    )


def _add_flow_options(parser):
    parser.add_argument("--t-min", type=_positive_float, default=1.0, help="Start time (default 1)")
    parser.add_argument("--t-max", type=_positive_float, default=1e6, help="End time (default 1e6)")
    parser.add_argument("--samples", type=int, help="Geometric samples (default WF_SAMPLES or 200)")
    parser.add_argument("--rtol", type=_positive_float, help="Relative tolerance (default 1e-9)")
    parser.add_argument("--atol", type=_positive_float, help="Absolute tolerance (default 1e-12)")
    parser.add_argument(
        "--method",
        type=str,
        choices=METHODS,
        default="DOP853",
        help="scipy integrator (default DOP853)",
    )


def parse_args(args):
    parser = argparse.ArgumentParser(
        prog="weightflow",
        description="Weight filtrations of lattices, DAGs and quivers, and the metric flow they govern",
    )
    parser.add_argument("--threads", type=int, help="Cap on worker threads")
    parser.add_argument("--seed", type=int, help="Seed for randomized checks and bootstrap")
    parser.add_argument(
        "--exact",
        action="store_true",
        help="Print closed forms with exact constants and exact masses",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    grade = sub.add_parser("grade-dag", help="Weight grading of a DAG with its certificate")
    _add_input(grade)
    grade.add_argument(
        "--method",
        type=str,
        choices=("auto", "enumerate", "mincut"),
        default="auto",
        help="Closure oracle used to verify the grading (default auto)",
    )

    hn = sub.add_parser("hn", help="Harder-Narasimhan filtration and mass")
    _add_input(hn)

    weight = sub.add_parser("weight", help="Weight filtration of a polarized lattice")
    _add_input(weight)

    iterate = sub.add_parser("iterate", help="Iterated weight filtration")
    _add_input(iterate)
    iterate.add_argument("--depth", type=int, help="Depth cap (default WF_MAX_DEPTH or 8)")

    simulate = sub.add_parser("simulate", help="Integrate the metric flow and write a CSV trajectory")
    _add_input(simulate)
    _add_flow_options(simulate)
    simulate.add_argument(
        "--start",
        type=str,
        choices=("identity", "asymptotic"),
        default="identity",
        help="Initial metric: the identity or the asymptotic solution at --t-min",
    )
    simulate.add_argument("--meta", type=str, help="Where to write the run summary (default: output with .json)")

    asymptotic = sub.add_parser("asymptotic", help="Closed-form asymptotic solution of the flow")
    _add_input(asymptotic)
    asymptotic.add_argument("--depth", type=int, help="Depth cap (default WF_MAX_DEPTH or 8)")
    asymptotic.add_argument("--residual", action="store_true", help="Also measure the flow residual")
    asymptotic.add_argument("--t-min", type=_positive_float, default=1e4, help="Residual window start (default 1e4)")
    asymptotic.add_argument("--t-max", type=_positive_float, default=1e40, help="Residual window end (default 1e40)")
    asymptotic.add_argument("--samples", type=int, default=60, help="Residual samples (default 60)")

    fit = sub.add_parser("fit", help="Fit iterated-log exponents to a CSV trajectory")
    _add_input(fit)
    fit.add_argument("--depth", type=int, default=1, help="Number of iterated logs (default 1)")
    fit.add_argument(
        "--t-window",
        type=_positive_float,
        nargs=2,
        metavar=("LO", "HI"),
        help="Fit window (default: the last two decades)",
    )
    fit.add_argument("--inverse-log", action="store_true", help="Add a 1/log t column to the basis")
    fit.add_argument("--bootstrap", type=int, help="Bootstrap resamples (default WF_BOOTSTRAP or 200)")

    verify = sub.add_parser("verify", help="Re-check a result document written by weightflow")
    _add_input(verify)

    parsed = parser.parse_args(args)
    if not parsed.schema and parsed.input is None:
        parser.error("the input document is required")
    if parsed.threads is not None and parsed.threads < 1:
        parser.error("--threads must be positive")
    if getattr(parsed, "t_min", None) is not None and parsed.t_min >= parsed.t_max:
        parser.error("--t-min must be below --t-max")
    if getattr(parsed, "samples", None) is not None and parsed.samples < 2:
        parser.error("--samples must be at least 2")
    if getattr(parsed, "depth", None) is not None and parsed.depth < 0:
        parser.error("--depth must be nonnegative")
    return parsed


def _options(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in PATH_OPTIONS and v is not None}


def _meta(args, kind: str, digest: str):
    from .schemas import Meta

    return Meta(kind=kind, sha256=digest, options=_options(args))


def _emit(model: BaseModel, args) -> None:
    from .schemas import dumps

    text = dumps(model)
    if args.output:
        Path(args.output).write_text(text)
        logger.info("wrote %s", args.output)
    else:
        sys.stdout.write(text)


def _schema(args) -> int:
    from .schemas import DagDocument, TrajectoryHeader, flow_adapter, structure_adapter, RESULTS

    if args.command == "grade-dag":
        schema = DagDocument.model_json_schema()
    elif args.command in ("hn", "weight", "iterate"):
        schema = structure_adapter.json_schema()
    elif args.command in ("simulate", "asymptotic"):
        schema = flow_adapter.json_schema()
    elif args.command == "fit":
        schema = TrajectoryHeader.model_json_schema()
    else:
        schema = {"oneOf": [RESULTS[k].model_json_schema() for k in VERIFIABLE]}
    sys.stdout.write(json.dumps(schema, sort_keys=True, indent=2) + "\n")
    return 0


def _names(L, chain):
    from .schemas import element_name

    return [element_name(L.label(x)) for x in chain]


def _grade_dag(args) -> int:
    from .dag import grading_energy, strict_multipliers_exist, verify_grading, weight_grading
    from .errors import NonConvergence
    from .schemas import CertificateEdge, DagDocument, GradingResult, read_input

    raw, digest = read_input(args.input)
    doc = DagDocument.model_validate_json(raw)
    G = doc.to_dag()
    v, u = weight_grading(G)
    if not verify_grading(G, v, args.method):
        raise NonConvergence("the active-set grading failed its optimality check")
    strict = strict_multipliers_exist(G, v)
    logger.info("grading of %d vertices, %d tight edges in the certificate", G.n, len(u.values))
    _emit(
        GradingResult(
            meta=_meta(args, "grading", digest),
            input=doc,
            grading=dict(v.values),
            certificate=[CertificateEdge(src=a, dst=b, u=q) for (a, b), q in sorted(u.values.items())],
            strict=None if strict is None else [CertificateEdge(src=a, dst=b, u=q) for (a, b), q in sorted(strict.values.items())],
            energy=grading_energy(G, v),
        ),
        args,
    )
    return 0


def _hn(args) -> int:
    from .hn import hn_filtration, is_semistable, mass
    from .schemas import HNResult, read_input, structure_adapter

    raw, digest = read_input(args.input)
    doc = structure_adapter.validate_json(raw)
    L, _, Z = doc.structure()
    hn = hn_filtration(L, Z)
    m = mass(L, Z)
    _emit(
        HNResult(
            meta=_meta(args, "hn", digest),
            input=doc,
            chain=_names(L, hn.chain),
            z=[(w.re, w.im) for w in hn.z],
            phases=list(hn.phases),
            mass=float(m),
            mass_exact=str(m.value) if args.exact else "",
            semistable=is_semistable(L, Z),
        ),
        args,
    )
    return 0


def _weight(args) -> int:
    from .schemas import WeightResult, read_input, structure_adapter
    from .weight import lambda_lattice, weight_filtration

    raw, digest = read_input(args.input)
    doc = structure_adapter.validate_json(raw)
    L, X, _ = doc.structure()
    a = weight_filtration(L, X)
    lam = lambda_lattice(L, X, a)
    _emit(
        WeightResult(
            meta=_meta(args, "weight", digest),
            input=doc,
            chain=_names(L, a.chain),
            labels=list(a.labels),
            lambda_mass=float(lam.mass()),
        ),
        args,
    )
    return 0


def _iterate(args) -> int:
    from .schemas import IterateResult, LevelReport, read_input, structure_adapter
    from .weight import iterated_weight_filtration

    raw, digest = read_input(args.input)
    doc = structure_adapter.validate_json(raw)
    L, X, _ = doc.structure()
    F = iterated_weight_filtration(L, X, args.depth)
    levels = [
        LevelReport(chain=_names(lattice, a.chain), labels=list(a.labels), elements=lattice.size, length=lattice.length)
        for a, lattice in zip(F.levels, F.lattices)
    ]
    logger.info("iterated weight filtration of depth %d", F.depth)
    _emit(
        IterateResult(
            meta=_meta(args, "iterate", digest),
            input=doc,
            depth=F.depth,
            chain=_names(L, F.chain),
            labels=[list(lab) for lab in F.labels],
            levels=levels,
        ),
        args,
    )
    return 0


def _quadruple(doc):
    from .schemas import QuiverDocument

    Q = doc.to_quadruple()
    projectors = doc.projectors(Q) if isinstance(doc, QuiverDocument) else None
    return Q, projectors


def _run_flow(doc, start: str, t_span, rtol=None, atol=None, samples=None, method="DOP853"):
    from .asymptotics import build_asymptotic_solution
    from .flow import integrate

    Q, projectors = _quadruple(doc)
    if start == "asymptotic":
        h0 = build_asymptotic_solution(Q, projectors).evaluate(t_span[0])
    else:
        h0 = Q.algebra.identity()
    return integrate(Q, h0, t_span, rtol=rtol, atol=atol, samples=samples, method=method)


def _simulate(args) -> int:
    from .schemas import SimulateResult, dumps, flow_adapter, read_input

    raw, digest = read_input(args.input)
    doc = flow_adapter.validate_json(raw)
    trajectory = _run_flow(
        doc,
        args.start,
        (args.t_min, args.t_max),
        rtol=args.rtol,
        atol=args.atol,
        samples=args.samples,
        method=args.method,
    )
    output = Path(args.output or Path(args.input).with_suffix(".csv").name)
    trajectory.to_csv(output)
    _, csv_digest = read_input(output)
    meta_path = Path(args.meta) if args.meta else output.with_suffix(".json")
    energies = trajectory.energies
    summary = SimulateResult(
        meta=_meta(args, "simulate", digest),
        input=doc,
        trajectory=output.name,
        trajectory_sha256=csv_digest,
        t_span=(args.t_min, args.t_max),
        samples=len(trajectory.times),
        energy_first=None if energies is None or not len(energies) else float(energies[0]),
        energy_last=None if energies is None or not len(energies) else float(energies[-1]),
    )
    meta_path.write_text(dumps(summary))
    logger.info("wrote %s and %s", output, meta_path)
    return 0


def _render(blocks, vertices, exact: bool):
    import sympy

    out = {}
    for v, b in zip(vertices, blocks):
        rows = []
        for r in range(b.shape[0]):
            rows.append([str(b[r, c] if exact else sympy.N(b[r, c], 12)) for c in range(b.shape[1])])
        out[v] = rows
    return out


def _asymptotic(args) -> int:
    from .asymptotics import build_asymptotic_solution, residual_l1
    from .schemas import AsymptoticResult, ResidualReport, Term, flow_adapter, read_input

    raw, digest = read_input(args.input)
    doc = flow_adapter.validate_json(raw)
    Q, projectors = _quadruple(doc)
    form = build_asymptotic_solution(Q, projectors, args.depth)
    residual = None
    if args.residual:
        profile = residual_l1(Q, form, (args.t_min, args.t_max), samples=args.samples)
        residual = ResidualReport(
            t_span=(args.t_min, args.t_max),
            exact=profile.exact,
            exponent=profile.exponent,
            log_exponent=profile.log_exponent,
            integrable=profile.integrable,
            tail=profile.tail,
        )
    vertices = Q.algebra.vertices
    _emit(
        AsymptoticResult(
            meta=_meta(args, "asymptotic", digest),
            input=doc,
            depth=form.depth,
            terms=[Term(**t) for t in form.terms()],
            h=_render(form.h, vertices, args.exact),
            leading=_render(form.leading(), vertices, args.exact),
            threshold=form.threshold(),
            residual=residual,
        ),
        args,
    )
    return 0


def _fit(args) -> int:
    from .fitting import fit_exponents
    from .flow import Trajectory
    from .schemas import Branch, FitResult, read_input

    _, digest = read_input(args.input)
    trajectory = Trajectory.from_csv(args.input)
    fit = fit_exponents(
        trajectory,
        args.depth,
        window=tuple(args.t_window) if args.t_window else None,
        inverse_log=args.inverse_log,
        bootstrap=args.bootstrap,
        seed=args.seed,
        threads=args.threads,
    )
    branches = [
        Branch(
            column=name,
            exponents=[float(x) for x in fit.exponents[k]],
            errors=None if fit.errors is None else [float(x) for x in fit.errors[k, : fit.depth]],
            intercept=float(fit.intercepts[k]),
        )
        for k, name in enumerate(fit.columns)
    ]
    _emit(
        FitResult(
            meta=_meta(args, "fit", digest),
            trajectory=Path(args.input).name,
            depth=fit.depth,
            window=fit.window,
            inverse_log=fit.inverse_log,
            condition=fit.condition,
            samples=fit.samples,
            branches=branches,
        ),
        args,
    )
    return 0


def _trajectory_file(base: Path, name: str) -> Path:
    from .errors import InputError

    for path in (base / name, Path(name)):
        if path.is_file():
            return path
    raise InputError("trajectory {} not found next to the result".format(name))


def _close(a, b, rtol: float = 1e-6) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return abs(a - b) <= rtol * max(1.0, abs(a), abs(b))


def _verify_simulate(result, base: Path) -> list:
    import numpy as np

    from .flow import Trajectory
    from .schemas import read_input

    problems = []
    path = _trajectory_file(base, result.trajectory)
    _, digest = read_input(path)
    if result.trajectory_sha256 is not None and digest != result.trajectory_sha256:
        problems.append("{} changed since it was written".format(result.trajectory))
    recorded = Trajectory.from_csv(path)
    if len(recorded.times) != result.samples:
        problems.append("{} rows instead of {}".format(len(recorded.times), result.samples))
    options = result.meta.options
    fresh = _run_flow(
        result.input,
        options.get("start", "identity"),
        tuple(result.t_span),
        rtol=options.get("rtol"),
        atol=options.get("atol"),
        samples=result.samples,
        method=options.get("method", "DOP853"),
    )
    if fresh.columns != recorded.columns or fresh.eigenvalues.shape != recorded.eigenvalues.shape:
        problems.append("the trajectory layout differs from a fresh integration")
    elif not np.allclose(fresh.eigenvalues, recorded.eigenvalues, rtol=1e-6, atol=1e-12):
        problems.append("the trajectory differs from a fresh integration")
    energies = fresh.energies
    first = None if energies is None or not len(energies) else float(energies[0])
    last = None if energies is None or not len(energies) else float(energies[-1])
    if not (_close(first, result.energy_first) and _close(last, result.energy_last)):
        problems.append("the recorded energies differ from a fresh integration")
    return problems


def _verify_fit(result, base: Path) -> list:
    from .errors import InputError
    from .fitting import fit_exponents
    from .flow import Trajectory
    from .schemas import read_input

    if result.trajectory is None:
        raise InputError("the fit result does not name its trajectory")
    problems = []
    path = _trajectory_file(base, result.trajectory)
    _, digest = read_input(path)
    if digest != result.meta.sha256:
        problems.append("{} changed since it was fitted".format(result.trajectory))
    options = result.meta.options
    fit = fit_exponents(
        Trajectory.from_csv(path),
        result.depth,
        window=tuple(result.window),
        inverse_log=result.inverse_log,
        bootstrap=options.get("bootstrap"),
        seed=options.get("seed"),
        threads=options.get("threads"),
    )
    if list(fit.columns) != [b.column for b in result.branches]:
        return problems + ["the fitted columns differ from the trajectory"]
    for k, branch in enumerate(result.branches):
        if not all(_close(float(x), y) for x, y in zip(fit.exponents[k], branch.exponents)):
            problems.append("exponents of {} differ from a fresh fit".format(branch.column))
        if not _close(float(fit.intercepts[k]), branch.intercept):
            problems.append("intercept of {} differs from a fresh fit".format(branch.column))
        if branch.errors is not None and fit.errors is not None:
            if not all(_close(float(x), y) for x, y in zip(fit.errors[k, : fit.depth], branch.errors)):
                problems.append("bootstrap errors of {} differ from a fresh fit".format(branch.column))
    return problems


def _verify_document(result, base: Path = Path(".")) -> list:
    """Mismatches between a result document and a fresh computation.

    Trajectory files named by simulate and fit results are looked up next to
    the result first.
    """
    from .asymptotics import build_asymptotic_solution
    from .dag import verify_grading, weight_grading
    from .errors import InputError
    from .hn import hn_filtration
    from .weight import RFiltration, iterated_weight_filtration, verify_weight_filtration

    kind = result.meta.kind
    if kind == "simulate":
        return _verify_simulate(result, base)
    if kind == "fit":
        return _verify_fit(result, base)
    problems = []
    if kind == "grading":
        G = result.input.to_dag()
        if not verify_grading(G, result.grading):
            problems.append("the grading is not the weight grading")
        v, _ = weight_grading(G)
        if dict(v.values) != dict(result.grading):
            problems.append("the grading differs from a fresh computation")
        flow = {x: 0 for x in G.vertices}
        for e in result.certificate:
            if e.u < 0:
                problems.append("negative multiplier on {} -> {}".format(e.src, e.dst))
            flow[e.src] += e.u
            flow[e.dst] -= e.u
        for x, m in zip(G.vertices, G.masses):
            if flow[x] != m * result.grading[x]:
                problems.append("the certificate does not balance at {}".format(x))
        return problems
    if kind == "asymptotic":
        Q, projectors = _quadruple(result.input)
        form = build_asymptotic_solution(Q, projectors)
        if [t["exponents"] for t in form.terms()] != [[str(q) for q in t.exponents] for t in result.terms]:
            problems.append("exponents differ from a fresh construction")
        return problems

    L, X, Z = result.input.structure()
    names = {n: k for k, n in enumerate(_names(L, range(L.size)))}
    try:
        chain = [names[n] for n in result.chain]
    except KeyError as e:
        raise InputError("chain refers to unknown element {}".format(e)) from e
    if kind == "hn":
        hn = hn_filtration(L, Z)
        if list(hn.chain) != chain or [(w.re, w.im) for w in hn.z] != list(result.z):
            problems.append("the HN filtration differs from a fresh computation")
    elif kind == "weight":
        if not verify_weight_filtration(L, X, RFiltration(tuple(chain), tuple(result.labels))):
            problems.append("the filtration fails the weight conditions")
    elif kind == "iterate":
        F = iterated_weight_filtration(L, X)
        if list(F.chain) != chain or [list(lab) for lab in F.labels] != [list(lab) for lab in result.labels]:
            problems.append("the iterated filtration differs from a fresh computation")
        if F.depth != result.depth:
            problems.append("depth {} instead of {}".format(F.depth, result.depth))
    return problems


def _verify(args) -> int:
    from .errors import InputError
    from .schemas import load_result, read_input

    raw, _ = read_input(args.input)
    result = load_result(raw)
    if result.meta.kind not in VERIFIABLE:
        raise InputError("results of kind {!r} cannot be verified".format(result.meta.kind))
    problems = _verify_document(result, Path(args.input).parent)
    for p in problems:
        logger.error("verification failed: %s", p)
    if problems:
        return 2
    logger.info("%s result verified", result.meta.kind)
    return 0


HANDLERS = {
    "grade-dag": _grade_dag,
    "hn": _hn,
    "weight": _weight,
    "iterate": _iterate,
    "simulate": _simulate,
    "asymptotic": _asymptotic,
    "fit": _fit,
    "verify": _verify,
}


def run(cli_args) -> int:
    """Dispatch a parsed command line; returns the exit status."""
    from .config import override_settings
    from .errors import WeightFlowError

    if cli_args.schema:
        return _schema(cli_args)
    try:
        override_settings(threads=cli_args.threads, seed=cli_args.seed)
        return HANDLERS[cli_args.command](cli_args)
    except WeightFlowError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except ValidationError as e:
        logger.error("invalid input document: %s", str(e).replace("\n", "; "))
        return 1
    except json.JSONDecodeError as e:
        logger.error("input is not JSON: %s", e)
        return 1
    except OSError as e:
        logger.error("cannot read or write %s", e)
        return 1


def cli():
    cli_args = parse_args(sys.argv[1:])
    sys.exit(run(cli_args))
