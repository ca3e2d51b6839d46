"""Adaptive refinement loop.

Each iteration selects the terminal domain contributing most to the estimator
variance (or, when the total estimate has stalled, the most massive one),
splits it where misclassified regions separate best from correctly classified
ones, enriches both children with new model evaluations, fits residual
expansions, and re-estimates the failure probability until the reliability
index bounds stabilize or the evaluation budget runs out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import (
    ConditionalEstimate,
    EstimatorConfig,
    FailureEstimate,
    aggregate,
    estimate_conditional_pf,
)
from .inputs import InputModel
from .spectral import bootstrap_fit, build_basis, compute_envelope
from .tree import ROOT_KEY, Key, SseTree


class UnsplittableDomainError(RuntimeError):
    """Raised when the auxiliary sample cannot be partitioned into regions of
    zero and nonzero criterion under either splitting criterion."""


class LimitStateError(RuntimeError):
    """Limit-state evaluation failed; carries the partial trace."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class RunConfig:
    """Algorithm parameters.

    ``n_ref`` points are added per enriched subdomain, ``n_total`` caps the
    limit-state evaluations, and the three epsilons control stopping,
    selection re-prioritization, and the near-surface band quantile.
    """

    n_ref: int = 20
    p_max: int = 3
    n_replications: int = 100
    n_total: int = 2000
    eps_beta: float = 0.03
    eps_pf: float = 0.001
    eps_band: float = 0.01
    alpha: float = 0.025
    n_aux: int = 10_000
    seed: int = 0
    rank_limit: int | None = None
    expansion_space: str = "quantile"
    bootstrap_mode: str = "path"
    latin_hypercube: bool = False
    n_boundary: int = 2000
    min_child_mass_fraction: float = 0.01
    rejection_cap_factor: int = 100
    estimators: EstimatorConfig = field(default_factory=EstimatorConfig)

    def __post_init__(self) -> None:
        if self.n_ref < 3:
            raise ValueError("n_ref must be >= 3")
        if self.n_total < 2 * self.n_ref:
            raise ValueError("n_total must be at least 2 * n_ref")
        if min(self.eps_beta, self.eps_pf, self.eps_band) <= 0:
            raise ValueError("thresholds must be > 0")
        if not 0.0 < self.alpha < 0.5:
            raise ValueError("alpha must be in (0, 0.5)")
        if self.n_replications < 2:
            raise ValueError("need at least 2 bootstrap replications")
        if self.n_aux < 100:
            raise ValueError("n_aux must be >= 100")
        if self.expansion_space not in ("quantile", "real_envelope"):
            raise ValueError("expansion_space must be 'quantile' or 'real_envelope'")
        if self.bootstrap_mode not in ("path", "fixed", "full"):
            raise ValueError("bootstrap_mode must be 'path', 'fixed' or 'full'")

    def to_dict(self) -> dict:
        est = self.estimators
        return {
            "n_ref": self.n_ref,
            "p_max": self.p_max,
            "n_replications": self.n_replications,
            "n_total": self.n_total,
            "eps_beta": self.eps_beta,
            "eps_pf": self.eps_pf,
            "eps_band": self.eps_band,
            "alpha": self.alpha,
            "n_aux": self.n_aux,
            "seed": self.seed,
            "rank_limit": self.rank_limit,
            "expansion_space": self.expansion_space,
            "bootstrap_mode": self.bootstrap_mode,
            "latin_hypercube": self.latin_hypercube,
            "estimators": {
                "mcs_n_floor": est.mcs_n_floor,
                "mcs_n_cap": est.mcs_n_cap,
                "target_failures": est.target_failures,
                "subset": {
                    "level_probability": est.subset.level_probability,
                    "n_per_level": est.subset.n_per_level,
                    "max_levels": est.subset.max_levels,
                },
            },
        }


@dataclass
class ReliabilityProblem:
    """Input model plus a batched limit-state evaluator x (n, M) -> g (n,)."""

    input_model: InputModel
    evaluator: object
    name: str = ""


@dataclass
class TraceRecord:
    iteration: int
    n_evaluations: int
    pf: float
    variance: float
    beta: float
    beta_lo: float
    beta_hi: float
    bounds_widened: bool
    refined: Key | None = None
    split_dimension: int | None = None
    split_location: float | None = None
    split_objective: float | None = None
    aux_mode: str | None = None
    n_new_expansions: int | None = None
    terminals: list = field(default_factory=list)


@dataclass
class SserResult:
    estimate: FailureEstimate
    trace: list[TraceRecord]
    tree: SseTree
    termination: str
    conditionals: dict


@dataclass
class AuxiliarySample:
    positive: np.ndarray
    zero: np.ndarray
    mode: str  # "misclassification" | "band"
    band_threshold: float | None = None


# ------------------------------------------------------------------ pure ops


def domain_error(mass: float, pf_variance: float) -> float:
    """Refinement score: squared domain mass times conditional-pf variance."""
    return mass * mass * pf_variance


def reprioritization_check(pf_history, eps_pf: float) -> bool:
    """True when the total estimate was stable over the last three iterations
    (relative variance below ``eps_pf``)."""
    if len(pf_history) < 3:
        return False
    last = np.asarray(pf_history[-3:], dtype=float)
    var = float(np.var(last, ddof=1))
    if last[-1] == 0.0:
        return var == 0.0
    return var / last[-1] ** 2 < eps_pf


def select_refinement_domain(candidates, prioritize_mass: bool) -> Key:
    """Pick the refinement domain from (key, mass, score) triples.

    Score-ranked normally, mass-ranked after re-prioritization; ties go to the
    larger mass, then the lexicographically smallest key.
    """
    if not candidates:
        raise ValueError("no candidate domains")

    def rank(c):
        key, mass, score = c
        primary = mass if prioritize_mass else score
        return (-primary, -mass, key)

    return min(candidates, key=rank)[0]


def plan_enrichment(n_ref: int, n_curr: int) -> tuple[int, int]:
    """Split the enrichment budget into (uniform, misclassified-region) counts."""
    if n_ref < 1:
        raise ValueError("n_ref must be >= 1")
    if n_curr < 0:
        raise ValueError("n_curr must be >= 0")
    n_uni = max(math.floor((n_ref - n_curr) / 2.0 + 0.5), 0)
    n_uni = min(n_uni, n_ref)
    return n_uni, n_ref - n_uni


def find_split(z_positive, z_zero, box) -> tuple[int, float, float]:
    """Best separating axis-aligned cut between two point sets.

    For every dimension, candidate locations are midpoints between consecutive
    distinct sample coordinates; the objective is the larger of the two
    one-sided separations minus one, which lies in [0, 1] (1 = perfect split).
    Location ties take the middle candidate; direction ties take the lowest
    dimension.
    """
    z_positive = np.atleast_2d(np.asarray(z_positive, dtype=float))
    z_zero = np.atleast_2d(np.asarray(z_zero, dtype=float))
    if len(z_positive) == 0 or len(z_zero) == 0:
        raise ValueError("both samples must be nonempty")
    box = np.asarray(box, dtype=float)
    m = box.shape[0]

    best_dim, best_loc, best_obj = None, None, -np.inf
    for d in range(m):
        zp = np.sort(z_positive[:, d])
        zz = np.sort(z_zero[:, d])
        merged = np.unique(np.concatenate([zp, zz]))
        if len(merged) < 2:
            continue
        cand = 0.5 * (merged[1:] + merged[:-1])
        frac_p = np.searchsorted(zp, cand, side="right") / len(zp)
        frac_z = np.searchsorted(zz, cand, side="right") / len(zz)
        obj = -1.0 + np.maximum(frac_p + 1.0 - frac_z, 1.0 - frac_p + frac_z)
        top = float(obj.max())
        ties = np.flatnonzero(obj >= top - 1e-12)
        j = ties[len(ties) // 2]
        if top > best_obj + 1e-12:
            best_dim, best_loc, best_obj = d, float(cand[j]), top
    if best_dim is None:
        # Degenerate samples (all coordinates identical): cut the box midway.
        return 0, float(box[0].mean()), 0.0
    return best_dim, best_loc, best_obj


def check_stopping(beta_history, eps_beta: float) -> bool:
    """True when the relative beta-bound width was below ``eps_beta`` in the
    last three iterations; undefined betas (pf = 0) never qualify."""
    if len(beta_history) < 3:
        return False
    for beta, lo, hi in beta_history[-3:]:
        if not (np.isfinite(beta) and np.isfinite(lo) and np.isfinite(hi)) or beta <= 0:
            return False
        if (hi - lo) / beta >= eps_beta:
            return False
    return True


# -------------------------------------------------------------- sampling ops


def _uniform_in_box(box, n, rng):
    lo = box[:, 0]
    return lo + rng.random((n, box.shape[0])) * (box[:, 1] - box[:, 0])


def build_auxiliary_samples(
    tree: SseTree,
    key: Key,
    n_aux: int,
    rng: np.random.Generator,
    band_quantile: float = 0.01,
) -> AuxiliarySample:
    """Uniform sample in the domain, partitioned into points of nonzero and
    zero misclassification probability; falls back to the near-surface band
    criterion when one side is empty."""
    node = tree.node(key)
    if not node.terminal:
        raise ValueError(f"node {key} is not terminal")
    if n_aux < 100:
        raise ValueError("need at least 100 auxiliary points")
    pts = _uniform_in_box(node.box, n_aux, rng)
    mean, reps = tree.predict_all_in(key, pts)
    pm = np.mean((mean <= 0.0)[:, None] != (reps <= 0.0), axis=1)
    pos = pm > 0.0
    if pos.any() and not pos.all():
        return AuxiliarySample(pts[pos], pts[~pos], "misclassification")
    threshold = float(np.quantile(np.abs(mean), band_quantile))
    pt = np.mean(np.abs(reps) <= threshold, axis=1)
    pos = pt > 0.0
    if pos.any() and not pos.all():
        return AuxiliarySample(pts[pos], pts[~pos], "band", threshold)
    raise UnsplittableDomainError(f"domain {key} has a single-class auxiliary sample")


def sample_enrichment(
    tree: SseTree,
    key: Key,
    plan: tuple[int, int],
    rng: np.random.Generator,
    box=None,
    mode: str = "misclassification",
    band_threshold: float | None = None,
    cap_factor: int = 100,
) -> np.ndarray:
    """Enrichment points: uniform part plus rejection-sampled points where the
    splitting criterion is nonzero.

    ``box`` restricts sampling to a sub-box of the (still unsplit) node, so
    prospective children can be enriched against the parent's predictor.
    Rejection is capped at ``cap_factor`` proposals per requested point; any
    shortfall is filled uniformly.
    """
    node = tree.node(key)
    if not node.terminal:
        raise ValueError(f"node {key} is not terminal")
    box = node.box if box is None else np.asarray(box, dtype=float)
    n_uni, n_mis = plan
    parts = []
    if n_uni:
        parts.append(_uniform_in_box(box, n_uni, rng))
    if n_mis:
        needed = n_mis
        budget = cap_factor * n_mis
        while needed > 0 and budget > 0:
            c = min(max(4 * needed, 64), budget)
            prop = _uniform_in_box(box, c, rng)
            budget -= c
            if mode == "misclassification":
                crit = tree.misclassification_in(key, prop)
            else:
                crit = tree.band_probability_in(key, prop, band_threshold)
            take = prop[crit > 0.0][:needed]
            if len(take):
                parts.append(take)
                needed -= len(take)
        if needed > 0:
            parts.append(_uniform_in_box(box, needed, rng))
    if not parts:
        return np.empty((0, tree.dimension))
    return np.vstack(parts)


# ------------------------------------------------------------------ the loop


def _stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed,) + tuple(int(t) for t in tags)))


def _evaluate(problem: ReliabilityProblem, x: np.ndarray, trace: list) -> np.ndarray:
    try:
        g = np.asarray(problem.evaluator(x), dtype=float).ravel()
    except Exception as exc:
        raise LimitStateError(f"limit-state evaluation failed: {exc}", trace) from exc
    if g.shape != (len(x),):
        raise LimitStateError("limit-state evaluator returned a wrong-shaped batch", trace)
    if not np.all(np.isfinite(g)):
        raise LimitStateError("non-finite limit-state value", trace)
    return g


def _fit_domain(tree: SseTree, key: Key, problem, config: RunConfig, rng) -> None:
    node = tree.node(key)
    ids = np.asarray(node.point_ids, dtype=int)
    if config.expansion_space == "quantile":
        basis = build_basis(node.box, config.p_max, config.rank_limit)
        pts = tree.design.u[ids]
    else:
        envelope = compute_envelope(problem.input_model, node.box, config.n_boundary, rng)
        basis = build_basis(envelope, config.p_max, config.rank_limit, space="real_envelope")
        pts = tree.design.x[ids]
    ensemble = bootstrap_fit(
        pts,
        tree.design.residual[ids],
        basis,
        config.n_replications,
        rng,
        mode=config.bootstrap_mode,
    )
    tree.attach_expansion(key, ensemble)


def run_sser(problem: ReliabilityProblem, config: RunConfig, trace_callback=None) -> SserResult:
    """Run the full adaptive algorithm and return the final estimate, the
    per-iteration trace, and the surrogate tree."""
    model = problem.input_model
    m = model.dimension
    seed = config.seed
    transform = model.quantile_to_real if config.expansion_space == "real_envelope" else None
    tree = SseTree(m, config.n_replications, transform=transform)
    trace: list[TraceRecord] = []

    # Initial design of 2 * n_ref points over the whole quantile space.
    rng0 = _stream(seed, 1)
    n0 = 2 * config.n_ref
    if config.latin_hypercube:
        from scipy.stats import qmc

        u0 = qmc.LatinHypercube(d=m, seed=rng0).random(n0)
    else:
        u0 = rng0.random((n0, m))
    x0 = model.quantile_to_real(u0)
    g0 = _evaluate(problem, x0, trace)
    tree.add_points(u0, x0, g0, step=0)
    _fit_domain(tree, ROOT_KEY, problem, config, _stream(seed, 5, *ROOT_KEY))

    cache: dict[Key, ConditionalEstimate] = {}
    pf_hint: dict[Key, float] = {}
    inert: set[Key] = set()
    iteration = 1
    split_info: dict | None = None
    termination = "budget"

    while True:
        for key in sorted(tree.terminal_keys):
            if key not in cache:
                cache[key] = estimate_conditional_pf(
                    tree, key, config.estimators, _stream(seed, 2, *key), pf_hint.get(key)
                )
                pf_hint[key] = cache[key].pf_mean
        keys = sorted(tree.terminal_keys)
        conditionals = [cache[k] for k in keys]
        masses = np.array([tree.node(k).mass for k in keys])
        estimate = aggregate(conditionals, masses, config.alpha)
        estimate.n_evaluations = len(tree.design)

        record = TraceRecord(
            iteration=iteration,
            n_evaluations=estimate.n_evaluations,
            pf=estimate.pf,
            variance=estimate.variance,
            beta=estimate.beta,
            beta_lo=estimate.beta_bounds[0],
            beta_hi=estimate.beta_bounds[1],
            bounds_widened=estimate.bounds_widened,
            terminals=[
                {
                    "key": list(k),
                    "mass": float(v),
                    "pf": c.pf_mean,
                    "variance": c.variance,
                    "score": domain_error(float(v), c.variance),
                }
                for k, v, c in zip(keys, masses, conditionals)
            ],
        )
        if split_info is not None:
            record.refined = split_info["key"]
            record.split_dimension = split_info["dimension"]
            record.split_location = split_info["location"]
            record.split_objective = split_info["objective"]
            record.aux_mode = split_info["mode"]
            record.n_new_expansions = split_info["n_new_expansions"]
        trace.append(record)
        if trace_callback is not None:
            trace_callback(record)

        beta_history = [(r.beta, r.beta_lo, r.beta_hi) for r in trace]
        if check_stopping(beta_history, config.eps_beta):
            termination = "stability"
            break
        if split_info is not None and split_info["n_new_expansions"] < 2:
            termination = "no_new_expansions"
            break
        if len(tree.design) >= config.n_total:
            termination = "budget"
            break

        # Refinement-domain selection, with inert fallbacks.
        prioritize_mass = reprioritization_check([r.pf for r in trace], config.eps_pf)
        candidates = [
            (k, tree.node(k).mass, domain_error(tree.node(k).mass, cache[k].variance))
            for k in keys
            if k not in inert
        ]
        aux = None
        while candidates:
            key = select_refinement_domain(candidates, prioritize_mass)
            try:
                aux = build_auxiliary_samples(
                    tree, key, config.n_aux, _stream(seed, 3, iteration, *key), config.eps_band
                )
                break
            except UnsplittableDomainError:
                inert.add(key)
                candidates = [c for c in candidates if c[0] != key]
        if aux is None:
            termination = "all_inert"
            break

        node = tree.node(key)
        dim, loc, objective = find_split(aux.positive, aux.zero, node.box)
        lo, hi = node.box[dim]
        margin = config.min_child_mass_fraction * (hi - lo)
        loc = float(np.clip(loc, lo + margin, hi - margin))

        child_boxes = (node.box.copy(), node.box.copy())
        child_boxes[0][dim, 1] = loc
        child_boxes[1][dim, 0] = loc

        # Enrichment points are drawn against the pre-split predictor, within
        # each prospective child box.
        ids = np.asarray(node.point_ids, dtype=int)
        planned: list[np.ndarray] = []
        committed = len(tree.design)
        for slot, cbox in enumerate(child_boxes):
            n_add = min(config.n_ref, config.n_total - committed)
            if n_add <= 0:
                planned.append(np.empty((0, m)))
                continue
            in_child = (
                int(np.count_nonzero(tree.design.u[ids, dim] <= loc))
                if slot == 0
                else int(np.count_nonzero(tree.design.u[ids, dim] > loc))
            )
            plan = plan_enrichment(n_add, in_child)
            pts = sample_enrichment(
                tree,
                key,
                plan,
                _stream(seed, 4, iteration, slot),
                box=cbox,
                mode=aux.mode,
                band_threshold=aux.band_threshold,
                cap_factor=config.rejection_cap_factor,
            )
            planned.append(pts)
            committed += len(pts)

        children = tree.split_node(key, dim, loc)
        parent_hint = pf_hint.get(key)
        n_new_expansions = 0
        for child, pts in zip(children, planned):
            if len(pts):
                x = model.quantile_to_real(pts)
                g = _evaluate(problem, x, trace)
                tree.add_points(pts, x, g, step=iteration)
            if len(pts) == config.n_ref:
                _fit_domain(tree, child, problem, config, _stream(seed, 5, *child))
                n_new_expansions += 1
            if parent_hint is not None:
                pf_hint[child] = parent_hint
        cache.pop(key, None)

        split_info = {
            "key": key,
            "dimension": dim,
            "location": loc,
            "objective": objective,
            "mode": aux.mode,
            "n_new_expansions": n_new_expansions,
        }
        iteration += 1

    final_conditionals = {k: cache[k] for k in sorted(tree.terminal_keys)}
    return SserResult(
        estimate=estimate,
        trace=trace,
        tree=tree,
        termination=termination,
        conditionals=final_conditionals,
    )
