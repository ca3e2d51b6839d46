"""Built-in reliability benchmark problems.

Two analytical two-dimensional limit states plus a five-story frame served by
the small finite-element solver.  Reference values were recomputed with this
package's own large-sample Monte Carlo oracles (see
scripts/compute_references.py); the frame additionally carries the commonly
published reference for its configuration as a cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import frame_fem
from .engine import ReliabilityProblem, RunConfig
from .inputs import CopulaModel, InputModel, Marginal

SQRT2 = math.sqrt(2.0)


def four_branch(x) -> np.ndarray:
    """Series system of four limit-state surfaces on two standard normals."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x1, x2 = x[:, 0], x[:, 1]
    branches = np.column_stack(
        [
            3.0 + 0.1 * (x1 - x2) ** 2 - (x1 + x2) / SQRT2,
            3.0 + 0.1 * (x1 - x2) ** 2 + (x1 + x2) / SQRT2,
            x1 - x2 + 6.0 / SQRT2,
            x2 - x1 + 6.0 / SQRT2,
        ]
    )
    return branches.min(axis=1)


def piecewise_linear(x) -> np.ndarray:
    """Two-piece linear limit state (Breitung's subset-simulation trap): a
    steep branch with negligible failure mass hides a shallow dominant one."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x1, x2 = x[:, 0], x[:, 1]
    g1 = np.where(x1 > 3.5, 4.0 - x1, 0.85 - 0.1 * x1)
    g2 = np.where(x2 > 2.0, 0.5 - 0.1 * x2, 2.3 - x2)
    return np.minimum(g1, g2)


def frame_top_displacement(x) -> np.ndarray:
    """Top-floor drift of the five-story frame, in meters."""
    return frame_fem.frame_top_displacement(x)


FRAME_DRIFT_THRESHOLD = 0.09  # meters


def frame_lsf(x) -> np.ndarray:
    return FRAME_DRIFT_THRESHOLD - frame_top_displacement(x)


def standard_normal_inputs(dimension: int) -> InputModel:
    return InputModel([Marginal("gaussian", 0.0, 1.0, name=f"X{i+1}") for i in range(dimension)])


def frame_input_model() -> InputModel:
    """21 correlated inputs of the five-story frame.

    Lognormal loads; all other marginals are Gaussians truncated to [0, inf)
    with (mean, std) of the untruncated parent.  The Gaussian copula couples
    geometric properties at 0.13, same-element-type (A, I) pairs at 0.95, and
    the two Young's moduli at 0.9.
    """
    nonneg = (0.0, None)
    spec = [
        ("P1", "lognormal", 133.0, 40.0, None),
        ("P2", "lognormal", 89.0, 35.6, None),
        ("P3", "lognormal", 71.2, 28.5, None),
        ("E4", "truncated_gaussian", 2.17e7, 1.92e6, nonneg),
        ("E5", "truncated_gaussian", 2.38e7, 1.92e6, nonneg),
        ("I6", "truncated_gaussian", 8.13e-3, 1.08e-3, nonneg),
        ("I7", "truncated_gaussian", 0.0115, 1.3e-3, nonneg),
        ("I8", "truncated_gaussian", 0.0214, 2.6e-3, nonneg),
        ("I9", "truncated_gaussian", 0.026, 3.03e-3, nonneg),
        ("I10", "truncated_gaussian", 0.0108, 2.6e-3, nonneg),
        ("I11", "truncated_gaussian", 0.0141, 3.46e-3, nonneg),
        ("I12", "truncated_gaussian", 0.0233, 5.62e-3, nonneg),
        ("I13", "truncated_gaussian", 0.026, 6.49e-3, nonneg),
        ("A14", "truncated_gaussian", 0.313, 0.0558, nonneg),
        ("A15", "truncated_gaussian", 0.372, 0.0744, nonneg),
        ("A16", "truncated_gaussian", 0.506, 0.093, nonneg),
        ("A17", "truncated_gaussian", 0.558, 0.112, nonneg),
        ("A18", "truncated_gaussian", 0.253, 0.093, nonneg),
        ("A19", "truncated_gaussian", 0.291, 0.102, nonneg),
        ("A20", "truncated_gaussian", 0.373, 0.121, nonneg),
        ("A21", "truncated_gaussian", 0.419, 0.195, nonneg),
    ]
    marginals = [Marginal(fam, mu, sd, tr, name=nm) for nm, fam, mu, sd, tr in spec]

    corr = np.eye(21)
    geometric = range(5, 21)  # I6..I13, A14..A21
    for i in geometric:
        for j in geometric:
            if i != j:
                corr[i, j] = 0.13
    for k in range(8):  # I6..I13 with A14..A21, same element type
        corr[5 + k, 13 + k] = corr[13 + k, 5 + k] = 0.95
    corr[3, 4] = corr[4, 3] = 0.9  # the two Young's moduli
    return InputModel(marginals, CopulaModel("gaussian", corr))


@dataclass(eq=False)
class BenchmarkProblem:
    id: str
    problem: ReliabilityProblem
    reference: dict
    recommended: dict = field(default_factory=dict)

    def run_config(self, **overrides) -> RunConfig:
        params = dict(self.recommended)
        params.update(overrides)
        return RunConfig(**params)


# Reference values recomputed by scripts/compute_references.py with this
# package's own sampling oracles; "published" entries are the commonly cited
# values for these classical benchmark configurations.
REFERENCES = {
    "four-branch": {
        "pf": 4.460e-3,
        "beta": 2.62,
        "oracle": {"pf": 4.4582e-3, "n": 10_000_000, "seed": 2026},
        "published": {"pf": 4.46e-3, "beta": 2.62, "n": 10_000_000},
    },
    "piecewise-linear": {
        "pf": 3.2e-5,
        "beta": 4.00,
        "oracle": {"pf": 3.1755e-5, "n": 100_000_000, "seed": 2026},
        "published": {"pf": 3.2e-5, "beta": 4.00, "n": 100_000_000},
    },
    "frame": {
        "pf": 1.49e-6,
        "beta": 4.67,
        "oracle": {"pf": None, "n": 10_000_000, "seed": 2026, "ci95": None},
        "published": {"pf": 1.49e-6, "beta": 4.67, "n": 100_000_000},
    },
}


def _registry() -> dict[str, BenchmarkProblem]:
    problems = {}
    problems["four-branch"] = BenchmarkProblem(
        id="four-branch",
        problem=ReliabilityProblem(standard_normal_inputs(2), four_branch, "four-branch"),
        reference=REFERENCES["four-branch"],
        recommended={"n_ref": 15, "p_max": 2, "n_replications": 500, "n_total": 900},
    )
    problems["piecewise-linear"] = BenchmarkProblem(
        id="piecewise-linear",
        problem=ReliabilityProblem(
            standard_normal_inputs(2), piecewise_linear, "piecewise-linear"
        ),
        reference=REFERENCES["piecewise-linear"],
        recommended={"n_ref": 40, "p_max": 6, "n_replications": 500, "n_total": 1600},
    )
    problems["frame"] = BenchmarkProblem(
        id="frame",
        problem=ReliabilityProblem(frame_input_model(), frame_lsf, "frame"),
        reference=REFERENCES["frame"],
        recommended={"n_ref": 40, "p_max": 4, "n_replications": 500, "n_total": 1600},
    )
    return problems


_PROBLEMS: dict[str, BenchmarkProblem] | None = None


def problem_ids() -> list[str]:
    return ["four-branch", "piecewise-linear", "frame"]


def get_problem(problem_id: str) -> BenchmarkProblem:
    global _PROBLEMS
    if _PROBLEMS is None:
        _PROBLEMS = _registry()
    if problem_id not in _PROBLEMS:
        raise KeyError(f"unknown benchmark {problem_id!r}; known: {problem_ids()}")
    return _PROBLEMS[problem_id]
