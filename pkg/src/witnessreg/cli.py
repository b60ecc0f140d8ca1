"""Command-line front end: ``witnessreg {generate,align,register,benchmark}``.

Exit codes: 0 success, 2 bad usage, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cost import CostSpec, eval_cost, eval_matched_cost
from .data import (
    SCHEMA_VERSION,
    CloudFormatError,
    GeneratedInstance,
    InstanceSpec,
    RunReport,
    generate_instance,
    load_cloud,
    save_cloud,
    save_report,
)
from .geom import Alignment, DegenerateInputError, diameter
from .prob import prob_alignment
from .registration import align_and_match, icp, kabsch_ssd, nearest_neighbor_match, p_icp_refined
from .witness import approx_align, best_alignment

log = logging.getLogger("witnessreg")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
ALIGN_ALGOS = ("exhaustive", "sampled:BETA", "prob:R", "kabsch")
REGISTER_ALGOS = ("icp", "approx-match[:BETA]", "p-icp-refined[:BETA]")
AGGREGATE_COLUMNS = [
    "algo", "cost_spec", "n", "sigma2", "outlier_frac", "beta",
    "mean_cost", "var_cost", "mean_ratio", "mean_wall_s", "runs",
]


class UsageError(ValueError):
    pass


def _parse_algo(text: str) -> tuple[str, float | None]:
    name, sep, arg = text.partition(":")
    if name in ("exhaustive", "kabsch", "icp"):
        if sep:
            raise UsageError(f"{name} takes no parameter")
        return name, None
    if name not in ("sampled", "prob", "approx-match", "p-icp-refined"):
        raise UsageError(f"unknown algorithm {text!r}")
    if not sep:
        if name in ("sampled", "prob"):
            raise UsageError(f"{name} needs a parameter, e.g. {name}:40")
        return name, None
    try:
        value = float(arg) if name == "prob" else int(arg)
    except ValueError:
        raise UsageError(f"bad parameter in {text!r}") from None
    if value <= 0:
        raise UsageError(f"parameter must be positive in {text!r}")
    return name, value


def is_registration(algo: str) -> bool:
    return _parse_algo(algo)[0] in ("icp", "approx-match", "p-icp-refined")


def _numerical_zero(value: float, P: np.ndarray) -> float:
    # optimal costs at rounding level are reported as exactly zero
    scale = max(diameter(P), 1.0) ** 2 * max(P.shape[0], 1)
    return 0.0 if value <= 1e-20 * scale else value


def _alignment_dict(a: Alignment) -> dict:
    return {"rotation": a.rotation.tolist(), "translation": a.translation.tolist()}


def run_algorithm(
    P: np.ndarray,
    Q: np.ndarray,
    algo: str,
    spec: CostSpec,
    seed: int | None,
    jobs: int = 1,
    bijective: bool = False,
    instance: dict | None = None,
    truth: dict | None = None,
) -> RunReport:
    """Run one solver and package its output as a :class:`RunReport`."""
    name, param = _parse_algo(algo)
    start = time.perf_counter()
    matching: list[int] | str | None = None
    label = None
    extra: dict = {}
    if name == "kabsch":
        a = kabsch_ssd(P, Q)
        cost, evaluated = eval_cost(P, Q, a, spec), 1
        matching = "identity"
    elif name in ("exhaustive", "sampled"):
        res = approx_align(P, Q, spec, beta=param, seed=seed, jobs=jobs)
        a, cost, evaluated = res.alignment, res.cost, res.candidates_evaluated
        matching = "identity"
        extra["witness"] = res.p_witness.tolist()
    elif name == "prob":
        cs = prob_alignment(P, Q, param, seed)
        a, cost = best_alignment(P, Q, cs, spec)
        evaluated = len(cs)
        matching = "identity"
    elif name == "icp":
        res = icp(P, Q)
        a, evaluated = res.alignment, res.candidates_evaluated
        m = nearest_neighbor_match(P, Q, a, spec.z)
        matching = m.indices.tolist()
        cost = eval_matched_cost(P, Q, m.indices, a, spec)
        label = res.label
        extra["icp_iterations"] = evaluated
    else:
        fn = align_and_match if name == "approx-match" else p_icp_refined
        res = fn(P, Q, spec, beta=param, seed=seed, bijective=bijective, jobs=jobs)
        a, cost, evaluated = res.alignment, res.cost, res.candidates_evaluated
        matching = res.matching.indices.tolist()
        label = res.label
        extra.update(res.extra)
    wall = time.perf_counter() - start

    optimal = None
    if matching == "identity" and spec.is_ssd:
        optimal = _numerical_zero(eval_cost(P, Q, kabsch_ssd(P, Q), spec), P)
    recovery = None
    if truth is not None and isinstance(matching, list):
        true_m = np.asarray(truth["true_matching"])
        inliers = np.setdiff1d(np.arange(len(true_m)), truth.get("outlier_indices", []))
        if inliers.size:
            recovery = float(np.mean(np.asarray(matching)[inliers] == true_m[inliers]))
    return RunReport(
        algorithm=algo,
        instance=instance or {"n": int(P.shape[0]), "d": int(P.shape[1])},
        cost_spec=str(spec),
        rotation=a.rotation.tolist(),
        translation=a.translation.tolist(),
        cost=float(cost),
        candidates_evaluated=int(evaluated),
        wall_time_seconds=wall,
        seed=seed,
        matching=matching,
        optimal_ssd_cost=optimal,
        permutation_recovery=recovery,
        label=label,
        extra=extra,
    )


def _write_json(obj: dict, path: Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text, encoding="utf-8")


def _instance_spec(args: argparse.Namespace, n: int, outliers: float, seed: int) -> InstanceSpec:
    return InstanceSpec(
        n=n,
        d=args.d,
        sigma2=args.sigma2,
        source=args.model,
        translation_bound=args.translation_bound,
        shuffle=args.shuffle,
        outlier_fraction=outliers,
        outlier_sigma2=args.outlier_sigma2,
        seed=seed,
    )


def truth_dict(spec: InstanceSpec, inst: GeneratedInstance) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "instance": asdict(spec),
        "true_alignment": _alignment_dict(inst.true_alignment),
        "recovery_alignment": _alignment_dict(inst.recovery),
        "true_matching": inst.true_matching.tolist(),
        "outlier_indices": inst.outlier_indices.tolist(),
    }


def cmd_generate(args: argparse.Namespace) -> int:
    spec = _instance_spec(args, args.n, args.outliers, args.seed)
    inst = generate_instance(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(inst.P, out / "P.csv")
    save_cloud(inst.Q, out / "Q.csv")
    _write_json(truth_dict(spec, inst), out / "truth.json")
    log.info("wrote %s", out)
    return 0


def _load_pair(args: argparse.Namespace) -> tuple[np.ndarray, np.ndarray, dict | None]:
    base = Path(args.dir) if args.dir else None
    p_path = Path(args.p) if args.p else (base / "P.csv" if base else None)
    q_path = Path(args.q) if args.q else (base / "Q.csv" if base else None)
    if p_path is None or q_path is None:
        raise UsageError("give --dir or both --p and --q")
    P, Q = load_cloud(p_path), load_cloud(q_path)
    truth = None
    t_path = Path(args.truth) if args.truth else (base / "truth.json" if base else None)
    if t_path is not None and t_path.exists():
        truth = json.loads(t_path.read_text(encoding="utf-8"))
    return P, Q, truth


def _run_single(args: argparse.Namespace, registration: bool) -> int:
    if is_registration(args.algo) != registration:
        allowed = REGISTER_ALGOS if registration else ALIGN_ALGOS
        raise UsageError(f"--algo must be one of {', '.join(allowed)}")
    spec = CostSpec.parse(args.cost)
    P, Q, truth = _load_pair(args)
    instance = truth["instance"] if truth else {"n": int(P.shape[0]), "d": int(P.shape[1])}
    report = run_algorithm(
        P, Q, args.algo, spec, args.seed, args.jobs,
        bijective=getattr(args, "bijective", False),
        instance=instance,
        truth=truth if registration else None,
    )
    _write_json(report.to_dict(), Path(args.out) if args.out else None)
    return 0


def cmd_align(args: argparse.Namespace) -> int:
    return _run_single(args, registration=False)


def cmd_register(args: argparse.Namespace) -> int:
    return _run_single(args, registration=True)


def _beta_of(algo: str) -> int | None:
    name, param = _parse_algo(algo)
    return int(param) if name in ("sampled", "approx-match", "p-icp-refined") and param else None


def cmd_benchmark(args: argparse.Namespace) -> int:
    if not args.seeds:
        raise UsageError("benchmark needs an explicit --seeds list")
    for algo in args.algos:
        _parse_algo(algo)
    specs = [CostSpec.parse(c) for c in args.cost]
    out = Path(args.out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    rows = []
    for n in args.n:
        for frac in args.outliers:
            for spec in specs:
                for algo in args.algos:
                    reports = []
                    for seed in args.seeds:
                        ispec = _instance_spec(args, n, frac, seed)
                        inst = generate_instance(ispec)
                        truth = truth_dict(ispec, inst)
                        rep = run_algorithm(
                            inst.P, inst.Q, algo, spec, seed, args.jobs,
                            bijective=args.bijective,
                            instance=asdict(ispec),
                            truth=truth if is_registration(algo) else None,
                        )
                        tag = f"{algo.replace(':', '-')}_n{n}_o{frac:g}_{specs.index(spec)}_s{seed}"
                        save_report(rep, out / "runs" / f"{tag}.json")
                        reports.append(rep)
                    costs = np.array([r.cost for r in reports])
                    ratios = [r.ratio for r in reports if r.ratio is not None]
                    rows.append({
                        "algo": algo,
                        "cost_spec": str(spec),
                        "n": n,
                        "sigma2": args.sigma2,
                        "outlier_frac": frac,
                        "beta": _beta_of(algo) if _beta_of(algo) is not None else "",
                        "mean_cost": float(costs.mean()),
                        "var_cost": float(costs.var()),
                        "mean_ratio": float(np.mean(ratios)) if ratios else "",
                        "mean_wall_s": float(np.mean([r.wall_time_seconds for r in reports])),
                        "runs": len(reports),
                    })
                    log.info("%s n=%d outliers=%g: mean cost %.6g", algo, n, frac, costs.mean())
    with open(out / "aggregate.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=AGGREGATE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return 0


def _add_instance_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--synthetic", action="store_true", help="uniform points in the unit cube (default)")
    src.add_argument("--model", help="CSV or ASCII PLY model to sample vertices from")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--sigma2", type=float, default=0.0, help="Gaussian noise variance")
    p.add_argument("--translation-bound", type=float, default=0.1)
    p.add_argument("--shuffle", action="store_true")
    p.add_argument("--outlier-sigma2", type=float, default=1.0)


def _add_run_flags(p: argparse.ArgumentParser, algos: tuple[str, ...]) -> None:
    p.add_argument("--dir", help="directory holding P.csv, Q.csv and optionally truth.json")
    p.add_argument("--p", help="source cloud file")
    p.add_argument("--q", help="target cloud file")
    p.add_argument("--truth", help="truth.json from 'generate'")
    p.add_argument("--algo", required=True, help=" | ".join(algos))
    p.add_argument("--cost", default="z=2,loss=power:2,agg=sum")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", help="report path (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="witnessreg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic benchmark instance")
    _add_instance_flags(g)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--outliers", type=float, default=0.0, help="fraction of P to corrupt")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("align", help="alignment with known correspondence")
    _add_run_flags(a, ALIGN_ALGOS)
    a.set_defaults(func=cmd_align)

    r = sub.add_parser("register", help="registration with unknown correspondence")
    _add_run_flags(r, REGISTER_ALGOS)
    r.add_argument("--bijective", action="store_true", help="one-to-one matching (Hungarian)")
    r.set_defaults(func=cmd_register)

    b = sub.add_parser("benchmark", help="seeded sweep over sizes, outlier rates and algorithms")
    _add_instance_flags(b)
    b.add_argument("--n", type=int, nargs="+", required=True)
    b.add_argument("--outliers", type=float, nargs="+", default=[0.0])
    b.add_argument("--seeds", type=int, nargs="+", required=True)
    b.add_argument("--algos", nargs="+", required=True)
    b.add_argument("--cost", nargs="+", default=["z=2,loss=power:2,agg=sum"])
    b.add_argument("--bijective", action="store_true")
    b.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    b.add_argument("--out-dir", required=True)
    b.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (OSError, CloudFormatError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (DegenerateInputError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
