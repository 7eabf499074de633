"""``surroshap`` command line.

Exit codes: 0 success, 2 bad arguments or invalid input files, 3 capacity
exceeded (exact enumeration too large), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .allocation import read_allocations_csv
from .bounds import (FitError, epsilon_from_bias, estimate_eta, total_bound, write_budget_json,
                     write_fit_csv)
from .dcopf import OPFOracle, characteristic_emissions, resolve_threads
from .exact import CapacityError
from .grid import (SystemValidationError, generate_scenario, load_scenario, load_system, save_scenario,
                   save_system, synthesize_system)
from .pipeline import METHODS, allocate_horizon, period_seed
from .properties import (exact_allocator, relative_distance, run_property_suite, write_evidence_csv,
                         write_reports_json)
from .sampling import NeedsMoreSamplesError, auto_sample_count
from .simplex import SolverError
from .surrogate import (TEST, SurrogateEvaluator, TrainConfig, TrainingError, evaluate_metrics, generate_dataset,
                        load_dataset, load_model, save_dataset, save_model, train)

EXIT_OK, EXIT_ARGS, EXIT_CAPACITY, EXIT_NUMERIC = 0, 2, 3, 4


class _Manifest:
    """Reproducibility record written next to each command's main output."""

    def __init__(self, args, argv):
        self.data = {
            "command": ["surroshap", *argv],
            "config": {k: v for k, v in vars(args).items() if k != "func"},
            "inputs": {},
            "outputs": [],
            "timings": {},
            "versions": {"surroshap": __version__, "numpy": np.__version__, "python": sys.version.split()[0]},
        }
        self._t0 = time.perf_counter()

    def input(self, path):
        if path:
            self.data["inputs"][str(path)] = hashlib.sha256(Path(path).read_bytes()).hexdigest()

    def output(self, path):
        self.data["outputs"].append(str(path))

    def stage(self, name, seconds):
        self.data["timings"][name] = seconds

    def write(self, main_output, **extra):
        self.data["timings"]["total"] = time.perf_counter() - self._t0
        self.data.update(extra)
        path = Path(str(main_output) + ".manifest.json")
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# ---------------------------------------------------------------------------
# commands

def cmd_system_gen(args, man):
    system = synthesize_system(args.thermal, args.renewable, args.load, args.buses, args.seed,
                               capacity_factor=args.capacity_factor)
    save_system(system, args.output)
    man.output(args.output)
    man.write(args.output, system=system.digest())
    print(f"wrote {args.output}: {system.n_entities} entities on {system.n_bus} buses")


def cmd_system_validate(args, man):
    system = load_system(args.file)
    for w in system.warnings:
        print(f"warning: {w}")
    print(f"{args.file}: ok ({system.n_thermal} thermal, {system.n_renewable} renewable, "
          f"{system.n_load} load, {system.n_branch} branches)")


def cmd_scenario_gen(args, man):
    system = load_system(args.system)
    man.input(args.system)
    scenario = generate_scenario(system, args.periods, args.seed)
    save_scenario(scenario, system, args.output)
    man.output(args.output)
    man.write(args.output)
    print(f"wrote {args.output}: {scenario.T} periods")


def cmd_dataset_gen(args, man):
    system = load_system(args.system)
    man.input(args.system)
    t0 = time.perf_counter()
    ds = generate_dataset(system, args.samples, args.seed, threads=args.threads)
    man.stage("label", time.perf_counter() - t0)
    save_dataset(ds, args.output)
    man.output(args.output)
    man.output(str(args.output) + ".json")
    man.write(args.output, split=ds.split_counts)
    counts = ds.split_counts
    print(f"wrote {args.output}: {len(ds)} rows, split {counts['train']}/{counts['val']}/{counts['test']}")


def cmd_train(args, man):
    ds = load_dataset(args.dataset)
    man.input(args.dataset)
    cfg = TrainConfig(hidden=args.hidden, layers=args.layers, epochs=args.epochs, lr=args.lr,
                      batch_size=args.batch_size, seed=args.seed)
    t0 = time.perf_counter()
    model = train(ds, cfg, verbose=args.verbose)
    man.stage("train", time.perf_counter() - t0)
    save_model(model, args.output)
    man.output(args.output)
    m = evaluate_metrics(model, ds, TEST)
    man.write(args.output, metrics={"rmse": m.rmse, "mbe": m.mbe, "r_squared": m.r_squared})
    print(f"wrote {args.output}: test rmse {m.rmse:.6g}  mbe {m.mbe:.6g}  r2 {m.r_squared:.6f}")


def _check_samples(method, M):
    if method != "exact" and (M < 2 or M % 2):
        raise _ArgError(f"--samples must be even and >= 2 for {method}, got {M}")


class _ArgError(ValueError):
    pass


def cmd_allocate(args, man):
    system = load_system(args.system)
    scenario = load_scenario(args.scenario, system)
    man.input(args.system)
    man.input(args.scenario)
    model = None
    if args.method == "surroshap":
        if not args.model:
            raise _ArgError("surroshap needs --model")
        model = load_model(args.model)
        man.input(args.model)
    M = args.samples
    _check_samples(args.method, M)
    if args.auto_samples and args.method in ("kernelshap", "surroshap"):
        oc = scenario[0]
        evaluate = SurrogateEvaluator(model) if model is not None else OPFOracle(system, args.threads)
        c_full = characteristic_emissions(system, oc, np.ones(system.n_entities, bool))
        M = auto_sample_count(system.n_entities, lambda S: evaluate(oc, S), c_full,
                              period_seed(args.seed, oc.t), M_start=M)
        print(f"auto-samples: M = {M}")
    horizon = allocate_horizon(system, scenario, model, M, args.seed, args.method, threads=args.threads)
    horizon.write_csv(system, args.output)
    man.output(args.output)
    for p, timing in zip(horizon.periods, horizon.manifest["timings"]["periods"]):
        resid = p.efficiency_residual
        print(f"t={p.t:4d}  efficiency residual {resid:+.3e}  ({timing['seconds']:.3f} s)")
    man.stage("allocate", horizon.manifest["timings"]["total"])
    man.write(args.output, allocation=horizon.manifest, samples=M)


def cmd_errors(args, man):
    system = load_system(args.system)
    scenario = load_scenario(args.scenario, system)
    man.input(args.system)
    man.input(args.scenario)
    _check_samples("kernelshap", args.samples)
    oracle, epsilon = None, 0.0
    if args.model:
        model = load_model(args.model)
        man.input(args.model)
        oracle = SurrogateEvaluator(model)
        if not args.dataset:
            raise _ArgError("--model needs --dataset to measure the surrogate bias")
        ds = load_dataset(args.dataset)
        man.input(args.dataset)
        metrics = evaluate_metrics(model, ds, TEST)
        epsilon = epsilon_from_bias(metrics.conditional_mbe)
    fits, etas, norms, xs = [], [], [], []
    for oc in scenario:
        est = estimate_eta(system, oc, args.samples, period_seed(args.seed, oc.t), oracle,
                           tail_fraction=args.tail, n_points=args.points)
        fits.append((oc.t, est.fit))
        etas.append(est.eta)
        xs.append(est.allocation.x)
        print(f"t={oc.t:4d}  eta {est.eta:.4g} ({100 * est.eta_rel:.3f}%)  window {est.fit.window}")
    eta = float(np.mean(etas))
    ref = float(np.linalg.norm(np.mean(xs, axis=0)))
    budget = total_bound(eta, epsilon, ref)
    write_budget_json(budget, args.output, periods=[{"t": t, "eta": e} for (t, _), e in zip(fits, etas)])
    man.output(args.output)
    if args.fit_csv:
        write_fit_csv(fits, args.fit_csv)
        man.output(args.fit_csv)
    man.write(args.output)
    print(f"eta {budget.eta:.4g}  epsilon {budget.epsilon:.4g}  total {budget.total:.4g} "
          f"({100 * budget.total_rel:.3f}% of the average allocation)")


def cmd_properties(args, man):
    system = load_system(args.system)
    scenario = load_scenario(args.scenario, system)
    man.input(args.system)
    man.input(args.scenario)
    if args.method == "exact":
        allocator = exact_allocator
    else:
        model = load_model(args.model) if args.model else None
        _check_samples(args.method, args.samples)

        def allocator(sys_, sc):
            return allocate_horizon(sys_, sc, model, args.samples, args.seed, args.method,
                                    threads=args.threads).matrix

    factors = [float(f) for f in args.factors.split(",")]
    reports = run_property_suite(system, scenario, allocator, factors=factors, slack=args.slack,
                                 reshape_budget=args.budget)
    write_reports_json(reports, args.output)
    man.output(args.output)
    if args.evidence:
        write_evidence_csv(reports, args.evidence)
        man.output(args.evidence)
    man.write(args.output)
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        extra = " (vacuous)" if r.vacuous else ""
        print(f"property {r.property_id}: {status}{extra}  {len(r.evidence)} records  {r.note}")
    if not all(r.passed for r in reports):
        return 1
    return 0


def cmd_compare(args, man):
    ref = read_allocations_csv(args.reference)
    oth = read_allocations_csv(args.other)
    if sorted(ref) != sorted(oth):
        raise _ArgError("reference and other cover different periods")
    for t in sorted(ref):
        if len(ref) > 1:
            print(f"t={t:4d}  {relative_distance(ref[t], oth[t]):.6g}")
    avg_ref = np.mean([ref[t] for t in sorted(ref)], axis=0)
    avg_oth = np.mean([oth[t] for t in sorted(ref)], axis=0)
    print(repr(relative_distance(avg_ref, avg_oth)))


# ---------------------------------------------------------------------------
# argument parsing

def _common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, default=0, help="base random seed")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: SURROSHAP_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surroshap", description="Shapley allocation of power-system emissions.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    system = sub.add_parser("system", help="generate or validate system files")
    ssub = system.add_subparsers(dest="action", required=True)
    gen = ssub.add_parser("gen", help="write a synthetic system")
    gen.add_argument("--thermal", type=int, required=True)
    gen.add_argument("--renewable", type=int, required=True)
    gen.add_argument("--load", type=int, required=True)
    gen.add_argument("--buses", type=int, required=True)
    gen.add_argument("--capacity-factor", type=float, default=1.0, help="line capacity relative to total load")
    gen.add_argument("-o", "--output", required=True)
    _common(gen)
    gen.set_defaults(func=cmd_system_gen)
    val = ssub.add_parser("validate", help="check a system file")
    val.add_argument("file")
    val.set_defaults(func=cmd_system_validate)

    scen = sub.add_parser("scenario", help="generate operating-condition scenarios")
    scsub = scen.add_subparsers(dest="action", required=True)
    sgen = scsub.add_parser("gen")
    sgen.add_argument("--system", required=True)
    sgen.add_argument("--periods", type=int, required=True)
    sgen.add_argument("-o", "--output", required=True)
    _common(sgen)
    sgen.set_defaults(func=cmd_scenario_gen)

    data = sub.add_parser("dataset", help="generate surrogate training data")
    dsub = data.add_subparsers(dest="action", required=True)
    dgen = dsub.add_parser("gen")
    dgen.add_argument("--system", required=True)
    dgen.add_argument("--samples", type=int, required=True)
    dgen.add_argument("-o", "--output", required=True)
    _common(dgen)
    dgen.set_defaults(func=cmd_dataset_gen)

    tr = sub.add_parser("train", help="train a surrogate model")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--hidden", type=int, default=TrainConfig.hidden)
    tr.add_argument("--layers", type=int, default=TrainConfig.layers)
    tr.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    tr.add_argument("--lr", type=float, default=TrainConfig.lr)
    tr.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    tr.add_argument("--verbose", action="store_true", help="print per-epoch losses")
    tr.add_argument("-o", "--output", required=True)
    _common(tr)
    tr.set_defaults(func=cmd_train)

    al = sub.add_parser("allocate", help="allocate emissions over a scenario")
    al.add_argument("method", choices=METHODS)
    al.add_argument("--system", required=True)
    al.add_argument("--scenario", required=True)
    al.add_argument("--model")
    al.add_argument("--samples", type=int, default=100_000)
    al.add_argument("--auto-samples", action="store_true",
                    help="grow the sample count by 10%% until the allocation norm moves less than 0.1%%, "
                         "starting from --samples (sampling methods, first period)")
    al.add_argument("-o", "--output", required=True)
    _common(al)
    al.set_defaults(func=cmd_allocate)

    er = sub.add_parser("errors", help="estimate the allocation error budget")
    er.add_argument("--system", required=True)
    er.add_argument("--scenario", required=True)
    er.add_argument("--model", help="surrogate evaluating the sampled coalitions")
    er.add_argument("--dataset", help="dataset whose test split measures the surrogate bias")
    er.add_argument("--samples", type=int, default=1_000_000)
    er.add_argument("--tail", type=float, default=0.1, help="fraction of samples in the fit window")
    er.add_argument("--points", type=int, default=100, help="checkpoints in the fit window")
    er.add_argument("--fit-csv")
    er.add_argument("-o", "--output", required=True)
    _common(er)
    er.set_defaults(func=cmd_errors)

    pr = sub.add_parser("properties", help="run the allocation property checks")
    pr.add_argument("--system", required=True)
    pr.add_argument("--scenario", required=True)
    pr.add_argument("--method", choices=METHODS, default="exact")
    pr.add_argument("--model")
    pr.add_argument("--samples", type=int, default=100_000)
    pr.add_argument("--factors", default="1.0,0.9,0.8,0.5")
    pr.add_argument("--slack", type=float, default=0.0, help="tolerance for approximate methods")
    pr.add_argument("--budget", type=int, default=10, help="accepted moves in the reshape search")
    pr.add_argument("--evidence", help="CSV of evidence records")
    pr.add_argument("-o", "--output", required=True)
    _common(pr)
    pr.set_defaults(func=cmd_properties)

    cmp_ = sub.add_parser("compare", help="relative L2 distance between two allocation CSVs")
    cmp_.add_argument("--reference", required=True)
    cmp_.add_argument("--other", required=True)
    cmp_.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "threads", None) is not None:
        resolve_threads(args.threads)
    man = _Manifest(args, argv)
    try:
        code = args.func(args, man)
    except CapacityError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CAPACITY
    except SystemValidationError as e:
        print("error: invalid system file", file=sys.stderr)
        for f in e.failures:
            print(f"  {f}", file=sys.stderr)
        return EXIT_ARGS
    except (NeedsMoreSamplesError, SolverError, TrainingError, FitError, FloatingPointError,
            np.linalg.LinAlgError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARGS
    return code or EXIT_OK
