"""Failure-probability estimation on surrogate predictors.

Per-domain estimates run plain Monte Carlo on a shared sample (common random
numbers across bootstrap replications) and escalate to subset simulation for
any replication that observes no failures.  Aggregation combines the
per-domain conditional estimates into the total probability, its variance,
equal-tail bootstrap bounds, and the generalized reliability index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .tree import Key, SseTree


@dataclass
class SubsetParams:
    """Subset simulation settings (Au & Beck style, on a box domain)."""

    level_probability: float = 0.1
    n_per_level: int = 1000
    max_levels: int = 20
    target_acceptance: float = 0.44
    initial_step: float = 0.3

    def __post_init__(self) -> None:
        if not 0.0 < self.level_probability < 1.0:
            raise ValueError("level probability must be in (0, 1)")
        if self.n_per_level < 100:
            raise ValueError("need at least 100 samples per level")
        if self.max_levels < 1:
            raise ValueError("max_levels must be >= 1")


@dataclass
class EstimatorConfig:
    """Per-domain Monte Carlo sizing plus subset simulation settings.

    The sample size targets ~``target_failures`` observed failures based on
    the previous estimate for the domain, floored and capped; surrogate calls
    are cheap but not free.
    """

    mcs_n_floor: int = 10_000
    mcs_n_cap: int = 1_000_000
    target_failures: float = 100.0
    chunk_size: int = 20_000
    subset: SubsetParams = field(default_factory=SubsetParams)

    def sample_size(self, prev_pf: float | None) -> int:
        guess = max(prev_pf if prev_pf else 0.0, 1e-2)
        n = max(self.mcs_n_floor, int(np.ceil(self.target_failures / guess)))
        return int(min(n, self.mcs_n_cap))


@dataclass
class ConditionalEstimate:
    """Failure probability of one terminal domain, per replication."""

    key: Key
    pf_mean: float
    pf_replications: np.ndarray  # (B,)
    estimator: str  # "mcs" | "subset_simulation"
    mcs_n: int
    n_escalated: int = 0

    @property
    def variance(self) -> float:
        return float(np.var(self.pf_replications, ddof=1))


@dataclass
class FailureEstimate:
    """Total failure probability with bootstrap uncertainty measures."""

    pf: float
    variance: float
    pf_bounds: tuple[float, float]
    beta: float
    beta_bounds: tuple[float, float]
    alpha: float
    n_evaluations: int = 0
    bounds_widened: bool = False

    @property
    def pf_is_zero(self) -> bool:
        return self.pf <= 0.0

    def to_dict(self) -> dict:
        def _num(v):
            return None if not np.isfinite(v) else float(v)

        return {
            "pf": float(self.pf),
            "pf_variance": float(self.variance),
            "pf_bounds": [_num(self.pf_bounds[0]), _num(self.pf_bounds[1])],
            "beta": _num(self.beta),
            "beta_bounds": [_num(self.beta_bounds[0]), _num(self.beta_bounds[1])],
            "alpha": self.alpha,
            "n_evaluations": int(self.n_evaluations),
            "bounds_widened": self.bounds_widened,
            "pf_is_zero": self.pf_is_zero,
        }


def _uniform_in_box(box: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    lo = box[:, 0]
    return lo + rng.random((n, box.shape[0])) * (box[:, 1] - box[:, 0])


def mcs_on_surrogate(predictor, box, n: int, rng: np.random.Generator):
    """Plain Monte Carlo failure fraction over a uniform sample in ``box``.

    Returns (pf, cov) with the usual binomial coefficient of variation,
    infinite when no failures were observed.
    """
    if n < 1000:
        raise ValueError("need at least 1000 Monte Carlo samples")
    box = np.asarray(box, dtype=float)
    vals = predictor(_uniform_in_box(box, n, rng))
    pf = float(np.mean(vals <= 0.0))
    cov = float(np.sqrt((1.0 - pf) / (n * pf))) if pf > 0 else np.inf
    return pf, cov


def _subset_simulation_batch(
    predict_for,
    box: np.ndarray,
    params: SubsetParams,
    rng: np.random.Generator,
    n_runs: int,
    chunk: int = 200_000,
) -> np.ndarray:
    """Independent subset simulations advanced in lockstep.

    ``predict_for(points, run_ids)`` evaluates each point under its run's
    predictor, so the whole batch costs one vectorized call per chain move.
    Runs finish independently (threshold at or below zero, stalled threshold,
    or the level cap) and drop out of the batch.
    """
    lo = box[:, 0]
    widths = box[:, 1] - box[:, 0]
    m = box.shape[0]
    p0 = params.level_probability
    n = params.n_per_level
    n_seed = max(int(round(p0 * n)), 1)
    chain_len = max(n // n_seed, 1)

    def evaluate(points2d: np.ndarray, run_ids: np.ndarray) -> np.ndarray:
        out = np.empty(len(points2d))
        for start in range(0, len(points2d), chunk):
            sl = slice(start, min(start + chunk, len(points2d)))
            out[sl] = predict_for(points2d[sl], run_ids[sl])
        return out

    run_ids = np.arange(n_runs)
    pts = lo + rng.random((n_runs, n, m)) * widths
    vals = evaluate(pts.reshape(-1, m), np.repeat(run_ids, n)).reshape(n_runs, n)
    pf_factor = np.ones(n_runs)
    t_prev = np.full(n_runs, np.inf)
    step = np.full(n_runs, params.initial_step)
    result = np.zeros(n_runs)

    for _level in range(params.max_levels):
        t = np.quantile(vals, p0, axis=1)
        frac_fail = np.mean(vals <= 0.0, axis=1)
        finished = (t <= 0.0) | (t >= t_prev)
        result[run_ids[finished]] = pf_factor[finished] * frac_fail[finished]
        keep = ~finished
        if not keep.any():
            return result
        run_ids, pts, vals = run_ids[keep], pts[keep], vals[keep]
        pf_factor, step = pf_factor[keep] * p0, step[keep]
        t_prev = t[keep]

        order = np.argsort(vals, axis=1, kind="stable")[:, :n_seed]
        cur = np.take_along_axis(pts, order[:, :, None], axis=1)
        cur_vals = np.take_along_axis(vals, order, axis=1)
        pooled_p = [cur.copy()]
        pooled_v = [cur_vals.copy()]
        for _move in range(chain_len - 1):
            prop = cur + rng.uniform(-1.0, 1.0, cur.shape) * (step[:, None, None] * widths)
            outside = (prop < lo) | (prop > box[:, 1])
            prop[outside] = cur[outside]
            prop_vals = evaluate(
                prop.reshape(-1, m), np.repeat(run_ids, n_seed)
            ).reshape(cur_vals.shape)
            accept = prop_vals <= t_prev[:, None]
            cur = np.where(accept[:, :, None], prop, cur)
            cur_vals = np.where(accept, prop_vals, cur_vals)
            pooled_p.append(cur.copy())
            pooled_v.append(cur_vals.copy())
            rate = np.mean(accept, axis=1)
            step = np.clip(step * np.exp(0.5 * (rate - params.target_acceptance)), 1e-3, 1.0)
        pts = np.concatenate(pooled_p, axis=1)
        vals = np.concatenate(pooled_v, axis=1)

    result[run_ids] = pf_factor * np.mean(vals <= 0.0, axis=1)
    return result


def subset_simulation_on_surrogate(
    predictor,
    box,
    params: SubsetParams,
    rng: np.random.Generator,
) -> float:
    """Subset simulation with component-wise Metropolis moves on a box.

    Intermediate thresholds are empirical quantiles of the predictor at
    ``level_probability``; the proposal scale adapts toward the target
    acceptance rate.  A non-decreasing threshold sequence (flat predictor)
    falls back to the current Monte Carlo fraction.
    """
    box = np.asarray(box, dtype=float)
    pf = _subset_simulation_batch(
        lambda pts, _ids: predictor(pts), box, params, rng, n_runs=1
    )
    return float(pf[0])


def estimate_conditional_pf(
    tree: SseTree,
    key: Key,
    config: EstimatorConfig,
    rng: np.random.Generator,
    prev_pf: float | None = None,
) -> ConditionalEstimate:
    """Conditional failure probability of a terminal domain.

    The mean predictor and all replications are evaluated on one shared
    uniform sample in the box; replications (and the mean) with zero observed
    failures are re-estimated by subset simulation.  Replications with
    identical terminal coefficients share a single escalation run.
    """
    node = tree.node(key)
    if not node.terminal:
        raise ValueError(f"node {key} is not terminal")
    box = node.box
    n_b = tree.n_replications
    n = config.sample_size(prev_pf)

    fail_mean = 0
    fail_reps = np.zeros(n_b)
    done = 0
    while done < n:
        c = min(config.chunk_size, n - done)
        mean_vals, rep_vals = tree.predict_all_in(key, _uniform_in_box(box, c, rng))
        fail_mean += int(np.count_nonzero(mean_vals <= 0.0))
        fail_reps += np.count_nonzero(rep_vals <= 0.0, axis=0)
        done += c

    pf_mean = fail_mean / n
    pf_reps = fail_reps / n
    n_escalated = 0

    # Escalate zero-failure predictors to subset simulation, batched over the
    # replications that need it.  Replications with identical terminal
    # coefficients (replications only differ through the terminal expansion)
    # share one run.
    selectors: list[int] = []  # -1 for the mean predictor, b-1 otherwise
    groups: list[list[int]] = []
    if fail_mean == 0:
        selectors.append(-1)
        groups.append([])
    zero = np.flatnonzero(fail_reps == 0)
    if len(zero):
        by_signature: dict[bytes, list[int]] = {}
        for b in zero:
            sig = b"" if node.ensemble is None else node.ensemble.replications[b].coefficients.tobytes()
            by_signature.setdefault(sig, []).append(int(b))
        for members in by_signature.values():
            selectors.append(members[0])
            groups.append(members)
    if selectors:
        sel = np.asarray(selectors)
        pf_sus = _subset_simulation_batch(
            lambda pts, ids: tree.predict_assigned_in(key, pts, sel[ids]),
            box,
            config.subset,
            rng,
            n_runs=len(sel),
        )
        for run, (selector, members) in enumerate(zip(selectors, groups)):
            if selector == -1 and not members:
                pf_mean = float(pf_sus[run])
                n_escalated += 1
            else:
                pf_reps[members] = pf_sus[run]
                n_escalated += len(members)

    return ConditionalEstimate(
        key=key,
        pf_mean=float(pf_mean),
        pf_replications=pf_reps,
        estimator="subset_simulation" if n_escalated else "mcs",
        mcs_n=n,
        n_escalated=n_escalated,
    )


def reliability_index(pf: float) -> float:
    """Generalized reliability index, +inf for a zero failure probability."""
    if pf <= 0.0:
        return np.inf
    if pf >= 1.0:
        return -np.inf
    return float(-ndtri(pf))


def aggregate(
    conditionals: list[ConditionalEstimate],
    masses,
    alpha: float = 0.025,
) -> FailureEstimate:
    """Combine per-domain conditional estimates into the total estimate.

    The total uses the mean-predictor estimates; replication totals provide
    the variance (independence across domains assumed) and the equal-tail
    bounds.  Bounds are widened to include the mean-predictor total when the
    bootstrap quantile interval excludes it, and the event is flagged.
    """
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must be in (0, 0.5)")
    masses = np.asarray(masses, dtype=float)
    if len(masses) != len(conditionals):
        raise ValueError("masses and conditionals must align")
    if abs(masses.sum() - 1.0) > 1e-9:
        raise ValueError("terminal masses must sum to 1")

    pf = float(np.dot(masses, [c.pf_mean for c in conditionals]))
    rep_matrix = np.vstack([c.pf_replications for c in conditionals])  # (K, B)
    rep_totals = masses @ rep_matrix
    variance = float(np.dot(masses**2, [c.variance for c in conditionals]))

    lb, ub = (float(q) for q in np.quantile(rep_totals, [alpha, 1.0 - alpha]))
    widened = False
    if pf < lb:
        lb, widened = pf, True
    if pf > ub:
        ub, widened = pf, True

    beta = reliability_index(pf)
    if pf <= 0.0:
        beta_bounds = (np.nan, np.nan)
    else:
        beta_bounds = (reliability_index(ub), reliability_index(lb))
    return FailureEstimate(
        pf=pf,
        variance=variance,
        pf_bounds=(lb, ub),
        beta=beta,
        beta_bounds=beta_bounds,
        alpha=alpha,
        bounds_widened=widened,
    )
