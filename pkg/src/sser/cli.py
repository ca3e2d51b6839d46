"""Command-line front end.

``sser run`` executes a study described by a JSON config (replicated over
seeds), streaming per-iteration convergence records and writing
machine-readable results; ``sser inspect`` summarizes a serialized surrogate
tree; ``sser list-problems`` shows the built-in benchmarks.

Config schema (JSON object):

  problem   builtin id ("four-branch" | "piecewise-linear" | "frame") or an
            object {"command": "...", "input_model": {...}, "timeout": 60,
            "batch_size": 1024} for an external child process
  method    "sser" (default) | "mcs" | "sus"
  sser      RunConfig fields (n_ref, p_max, n_replications, n_total, ...)
  mcs       {"n": 100000}
  sus       SubsetParams fields
  study     {"seeds": [0, 1, ...]} or {"n_seeds": 20, "first_seed": 0},
            plus "output": directory

Per-seed outputs: result.json, trace.csv, tree.json; study-level:
summary.json with median/quantile convergence envelopes.  Files contain no
timestamps, so identical configs reproduce byte-identical results.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import benchmarks
from .engine import LimitStateError, ReliabilityProblem, RunConfig, run_sser
from .estimators import (
    EstimatorConfig,
    SubsetParams,
    mcs_on_surrogate,
    reliability_index,
    subset_simulation_on_surrogate,
)
from .external import ExternalLsf, ProtocolError
from .inputs import InputModel
from .tree import SseTree

TRACE_COLUMNS = [
    "iteration",
    "n_evaluations",
    "pf",
    "pf_variance",
    "beta",
    "beta_lo",
    "beta_hi",
    "bounds_widened",
    "refined_level",
    "refined_index",
    "split_dimension",
    "split_location",
    "split_objective",
    "aux_mode",
    "n_new_expansions",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def trace_csv_row(record) -> str:
    ref = record.refined
    cells = [
        record.iteration,
        record.n_evaluations,
        record.pf,
        record.variance,
        record.beta,
        record.beta_lo,
        record.beta_hi,
        record.bounds_widened,
        ref[0] if ref else None,
        ref[1] if ref else None,
        record.split_dimension,
        record.split_location,
        record.split_objective,
        record.aux_mode,
        record.n_new_expansions,
    ]
    return ",".join(_fmt(c) for c in cells)


def _json_dump(obj, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _build_run_config(spec: dict, seed: int) -> RunConfig:
    params = dict(spec.get("sser", {}))
    est = params.pop("estimators", None)
    if est is not None:
        sub = est.pop("subset", None)
        kwargs = dict(est)
        if sub is not None:
            kwargs["subset"] = SubsetParams(**sub)
        params["estimators"] = EstimatorConfig(**kwargs)
    params["seed"] = seed
    return RunConfig(**params)


class _Study:
    """Resolved study: problem factory plus method parameters."""

    def __init__(self, spec: dict, out_dir: Path, quiet: bool):
        self.spec = spec
        self.out_dir = out_dir
        self.quiet = quiet
        self.method = spec.get("method", "sser")
        if self.method not in ("sser", "mcs", "sus"):
            raise ValueError(f"unknown method {self.method!r}")
        problem = spec.get("problem")
        if problem is None:
            raise ValueError("config must name a problem")
        self.external = isinstance(problem, dict)
        if self.external:
            if "command" not in problem or "input_model" not in problem:
                raise ValueError("external problem needs 'command' and 'input_model'")
            self.problem_label = problem["command"]
        else:
            benchmarks.get_problem(problem)  # validate early
            self.problem_label = problem

    def seeds(self) -> list[int]:
        study = self.spec.get("study", {})
        if "seeds" in study:
            seeds = [int(s) for s in study["seeds"]]
        else:
            first = int(study.get("first_seed", 0))
            seeds = list(range(first, first + int(study.get("n_seeds", 1))))
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be distinct")
        return seeds

    def open_problem(self):
        """Problem instance plus an optional closer (external children are
        one per run, never shared)."""
        spec = self.spec["problem"]
        if not self.external:
            return benchmarks.get_problem(spec).problem, None
        lsf = ExternalLsf(
            spec["command"],
            timeout=float(spec.get("timeout", 60.0)),
            batch_size=int(spec.get("batch_size", 1024)),
        )
        lsf.start()
        model = InputModel.from_dict(spec["input_model"])
        return ReliabilityProblem(model, lsf, name="external"), lsf.close


def _default_sser_params(study: _Study) -> dict:
    if study.external:
        return {}
    return dict(benchmarks.get_problem(study.spec["problem"]).recommended)


def _run_one_seed(study: _Study, seed: int) -> dict:
    seed_dir = study.out_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    problem, closer = study.open_problem()
    try:
        if study.method == "sser":
            return _run_sser_seed(study, seed, seed_dir, problem)
        return _run_sampling_seed(study, seed, seed_dir, problem)
    finally:
        if closer is not None:
            closer()


def _run_sser_seed(study: _Study, seed: int, seed_dir: Path, problem) -> dict:
    spec = dict(study.spec)
    merged = _default_sser_params(study)
    merged.update(spec.get("sser", {}))
    spec["sser"] = merged
    config = _build_run_config(spec, seed)

    trace_path = seed_dir / "trace.csv"
    with open(trace_path, "w") as trace_file:
        trace_file.write(",".join(TRACE_COLUMNS) + "\n")

        def on_record(record):
            trace_file.write(trace_csv_row(record) + "\n")
            trace_file.flush()
            if not study.quiet:
                beta = "inf" if not np.isfinite(record.beta) else f"{record.beta:.4f}"
                print(
                    f"[seed {seed}] iter {record.iteration:3d}  evals {record.n_evaluations:5d}"
                    f"  pf {record.pf:.4e}  beta {beta}",
                    flush=True,
                )

        try:
            result = run_sser(problem, config, trace_callback=on_record)
        except LimitStateError as exc:
            _json_dump(
                {"seed": seed, "error": str(exc), "iterations": len(exc.trace)},
                seed_dir / "result.json",
            )
            raise

    extras = {}
    for key, cond in result.conditionals.items():
        node = result.tree.node(key)
        extras[key] = {
            "pf": cond.pf_mean,
            "pf_variance": cond.variance,
            "real_box": _marginal_quantile_box(problem.input_model, node.box),
        }
    result.tree.save(seed_dir / "tree.json", extras=extras)

    payload = {
        "problem": study.problem_label,
        "method": "sser",
        "seed": seed,
        "config": config.to_dict(),
        "estimate": result.estimate.to_dict(),
        "iterations": len(result.trace),
        "termination": result.termination,
        "trace": [
            {
                "iteration": r.iteration,
                "n_evaluations": r.n_evaluations,
                "pf": r.pf,
                "beta": None if not np.isfinite(r.beta) else r.beta,
            }
            for r in result.trace
        ],
    }
    _json_dump(payload, seed_dir / "result.json")
    return payload


def _marginal_quantile_box(model: InputModel, box: np.ndarray) -> list[list[float]]:
    """Per-dimension marginal quantile bounds of a quantile-space box (exact
    for independent inputs, indicative under a copula)."""
    eps = 1e-12
    out = []
    for i, marginal in enumerate(model.marginals):
        lo = float(marginal.ppf(max(box[i, 0], eps)))
        hi = float(marginal.ppf(min(box[i, 1], 1.0 - eps)))
        out.append([lo, hi])
    return out


def _run_sampling_seed(study: _Study, seed: int, seed_dir: Path, problem) -> dict:
    model = problem.input_model
    unit_box = np.column_stack([np.zeros(model.dimension), np.ones(model.dimension)])
    counter = {"n": 0}

    def predictor(u):
        counter["n"] += len(u)
        return problem.evaluator(model.quantile_to_real(u))

    rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    if study.method == "mcs":
        n = int(study.spec.get("mcs", {}).get("n", 100_000))
        pf, cov = mcs_on_surrogate(predictor, unit_box, n, rng)
        estimate = {"pf": pf, "cov": None if not np.isfinite(cov) else cov}
    else:
        params = SubsetParams(**study.spec.get("sus", {}))
        pf = subset_simulation_on_surrogate(predictor, unit_box, params, rng)
        estimate = {"pf": pf, "cov": None}
    beta = reliability_index(pf)
    estimate.update(
        {
            "beta": None if not np.isfinite(beta) else beta,
            "n_evaluations": counter["n"],
        }
    )
    payload = {
        "problem": study.problem_label,
        "method": study.method,
        "seed": seed,
        "config": study.spec.get("mcs" if study.method == "mcs" else "sus", {}),
        "estimate": estimate,
    }
    _json_dump(payload, seed_dir / "result.json")
    return payload


def _quantiles(values, qs=(0.1, 0.5, 0.9)):
    arr = np.asarray(values, dtype=float)
    return [None if not np.isfinite(v) else float(v) for v in np.quantile(arr, qs)]


def _summarize(study: _Study, results: dict[int, dict]) -> dict:
    seeds = sorted(results)
    summary = {
        "problem": study.problem_label,
        "method": study.method,
        "seeds": seeds,
        "results": {str(s): results[s]["estimate"] for s in seeds},
    }
    pfs = [results[s]["estimate"]["pf"] for s in seeds]
    evals = [results[s]["estimate"]["n_evaluations"] for s in seeds]
    betas = [
        results[s]["estimate"]["beta"] if results[s]["estimate"]["beta"] is not None else np.inf
        for s in seeds
    ]
    summary["median_pf"] = float(np.median(pfs))
    summary["median_n_evaluations"] = float(np.median(evals))
    med_beta = float(np.median(betas))
    summary["median_beta"] = None if not np.isfinite(med_beta) else med_beta

    if study.method == "sser":
        per_iteration = []
        max_iter = max(len(results[s].get("trace", [])) for s in seeds)
        for i in range(1, max_iter + 1):
            rows = [r["trace"][i - 1] for r in results.values() if len(r.get("trace", [])) >= i]
            pf_q = _quantiles([row["pf"] for row in rows])
            beta_q = _quantiles(
                [row["beta"] if row["beta"] is not None else np.inf for row in rows]
            )
            per_iteration.append(
                {
                    "iteration": i,
                    "n_seeds": len(rows),
                    "pf_q10": pf_q[0],
                    "pf_q50": pf_q[1],
                    "pf_q90": pf_q[2],
                    "beta_q10": beta_q[0],
                    "beta_q50": beta_q[1],
                    "beta_q90": beta_q[2],
                    "n_evaluations_q50": float(
                        np.median([row["n_evaluations"] for row in rows])
                    ),
                }
            )
        summary["per_iteration"] = per_iteration
    return summary


def run_study(config_path: str, out_dir: str | None = None, seed: int | None = None, quiet: bool = False) -> int:
    """Execute a study config; returns a process exit status."""
    with open(config_path) as fh:
        spec = json.load(fh)
    study_block = spec.get("study", {})
    output = Path(out_dir or study_block.get("output", "sser-out"))
    output.mkdir(parents=True, exist_ok=True)
    if not os.access(output, os.W_OK):
        raise ValueError(f"output directory {output} is not writable")
    study = _Study(spec, output, quiet)
    seeds = [seed] if seed is not None else study.seeds()

    max_workers = int(os.environ.get("SSER_THREADS", "0")) or min(4, os.cpu_count() or 1)
    results: dict[int, dict] = {}
    if max_workers > 1 and len(seeds) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {pool.submit(_run_one_seed, study, s): s for s in seeds}
            for fut in concurrent.futures.as_completed(futures):
                results[futures[fut]] = fut.result()
    else:
        for s in seeds:
            results[s] = _run_one_seed(study, s)

    _json_dump(_summarize(study, results), output / "summary.json")
    if not quiet:
        print(f"study complete: {len(seeds)} seed(s), results in {output}")
    return 0


def inspect_tree(path: str, top: int | None = None) -> int:
    """Human-readable partition report for a serialized tree."""
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != SseTree.FORMAT:
        raise ValueError(f"unsupported tree file format: {data.get('format')!r}")
    terminals = [n for n in data["nodes"] if n["terminal"]]
    rows = []
    for node in terminals:
        pf = node.get("pf", 0.0) or 0.0
        rows.append((node["mass"] * pf, node))
    rows.sort(key=lambda r: -r[0])
    total_mass = sum(n["mass"] for n in terminals)
    print(f"tree: {data['dimension']}-dimensional, {len(data['nodes'])} nodes, "
          f"{len(terminals)} terminal domains, total mass {total_mass:.12f}")
    print(f"{'key':>8}  {'mass':>12}  {'pf':>12}  {'mass*pf':>12}  box")
    for contribution, node in rows[: top or len(rows)]:
        key = tuple(node["key"])
        box = "; ".join(f"[{lo:.4g},{hi:.4g}]" for lo, hi in node["box"])
        real = node.get("real_box")
        real_s = " | real " + "; ".join(f"[{lo:.4g},{hi:.4g}]" for lo, hi in real) if real else ""
        pf = node.get("pf", 0.0) or 0.0
        print(f"{str(key):>8}  {node['mass']:12.6e}  {pf:12.6e}  {contribution:12.6e}  {box}{real_s}")
    return 0


def list_problems() -> int:
    for pid in benchmarks.problem_ids():
        bp = benchmarks.get_problem(pid)
        rec = ", ".join(f"{k}={v}" for k, v in bp.recommended.items())
        ref = bp.reference
        print(f"{pid}: M={bp.problem.input_model.dimension}, reference pf={ref['pf']:.3g} "
              f"(beta={ref['beta']}); recommended {rec}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sser", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a study from a JSON config")
    p_run.add_argument("--config", required=True, help="path to the study config")
    p_run.add_argument("--seed", type=int, default=None, help="run a single seed only")
    p_run.add_argument("--out", default=None, help="output directory override")
    p_run.add_argument("--quiet", action="store_true", help="suppress progress output")

    p_inspect = sub.add_parser("inspect", help="summarize a serialized tree")
    p_inspect.add_argument("tree", help="path to a tree.json file")
    p_inspect.add_argument("--top", type=int, default=None, help="show only the top rows")

    sub.add_parser("list-problems", help="list built-in benchmark problems")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return run_study(args.config, args.out, args.seed, args.quiet)
        if args.command == "inspect":
            return inspect_tree(args.tree, args.top)
        return list_problems()
    except (ValueError, KeyError, OSError, ProtocolError, LimitStateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
