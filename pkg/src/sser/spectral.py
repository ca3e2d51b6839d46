"""Sparse polynomial expansions on boxes.

Tensorized Legendre bases orthonormal under the uniform measure on a box,
degree-adaptive sparse regression (least-angle regression with least-squares
refit, model selection by leave-one-out error), and bootstrap replications
for point-wise error estimation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .inputs import InputModel


@dataclass(frozen=True, eq=False)
class BasisSpec:
    """Multi-index set plus the affine map from the expansion box to [-1,1]^M.

    ``space`` records which coordinates the expansion consumes: subdomain
    quantile coordinates (default) or real coordinates on an enveloping
    hypercube.
    """

    indices: np.ndarray  # (K, M) nonnegative int
    center: np.ndarray  # (M,)
    half_width: np.ndarray  # (M,)
    space: str = "quantile"

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=int)
        if idx.ndim != 2:
            raise ValueError("indices must be a (K, M) array")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "half_width", np.asarray(self.half_width, dtype=float))
        if np.any(self.half_width <= 0):
            raise ValueError("half widths must be > 0")
        if len(np.unique(idx, axis=0)) != len(idx):
            raise ValueError("multi-indices must be distinct")

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    @property
    def dimension(self) -> int:
        return self.indices.shape[1]

    def subset(self, cols) -> "BasisSpec":
        return BasisSpec(self.indices[cols], self.center, self.half_width, self.space)

    def design_matrix(self, points) -> np.ndarray:
        """Evaluate all basis functions at the given points, (n, K).

        Points may lie outside the box; the polynomials extrapolate.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        t = (pts - self.center) / self.half_width
        n, m = t.shape
        out = np.ones((n, self.size))
        for d in range(m):
            degs = self.indices[:, d]
            dmax = int(degs.max()) if len(degs) else 0
            if dmax == 0:
                continue
            # Legendre Vandermonde, rescaled to unit norm under the uniform
            # measure on [-1, 1]: E[P_k^2] = 1/(2k+1).
            v = np.polynomial.legendre.legvander(t[:, d], dmax)
            v *= np.sqrt(2.0 * np.arange(dmax + 1) + 1.0)
            out *= v[:, degs]
        return out


def total_degree_indices(m: int, p_max: int, rank_limit: int | None = None) -> np.ndarray:
    """All multi-indices with total degree <= p_max and at most ``rank_limit``
    nonzero entries, ordered by total degree then lexicographically."""
    if p_max < 0:
        raise ValueError("p_max must be >= 0")
    rank = m if rank_limit is None else int(rank_limit)
    rows = []

    def grow(prefix, remaining, nonzero):
        d = len(prefix)
        if d == m:
            rows.append(prefix)
            return
        for v in range(remaining + 1):
            nz = nonzero + (v > 0)
            if nz > rank:
                break
            grow(prefix + [v], remaining - v, nz)

    for total in range(p_max + 1):
        start = len(rows)
        grow([], total, 0)
        block = [r for r in rows[start:] if sum(r) == total]
        rows[start:] = sorted(block)
    return np.asarray(rows, dtype=int)


def build_basis(box, p_max: int, rank_limit: int | None = None, space: str = "quantile") -> BasisSpec:
    """Tensorized Legendre basis orthonormal w.r.t. the uniform measure on ``box``."""
    box = np.asarray(box, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2:
        raise ValueError("box must be an (M, 2) array of [lo, hi] rows")
    widths = box[:, 1] - box[:, 0]
    if np.any(widths <= 0):
        raise ValueError("box is empty in at least one dimension")
    if rank_limit is not None and rank_limit < 1:
        raise ValueError("rank_limit must be >= 1")
    idx = total_degree_indices(box.shape[0], p_max, rank_limit)
    return BasisSpec(idx, center=box.mean(axis=1), half_width=widths / 2.0, space=space)


@dataclass(eq=False)
class PceExpansion:
    """A fitted expansion: basis, aligned coefficients, relative LOO error."""

    basis: BasisSpec
    coefficients: np.ndarray
    loo_error: float

    def __post_init__(self) -> None:
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.basis.size,):
            raise ValueError("coefficient vector length must equal the basis size")

    def evaluate(self, points) -> np.ndarray:
        return self.basis.design_matrix(points) @ self.coefficients


@dataclass(eq=False)
class BootstrapEnsemble:
    """Mean expansion plus B replications sharing one basis."""

    mean: PceExpansion
    replications: list[PceExpansion]

    def __post_init__(self) -> None:
        if len(self.replications) < 2:
            raise ValueError("need at least B = 2 replications")
        self._coef_matrix = None

    @property
    def n_replications(self) -> int:
        return len(self.replications)

    @property
    def coef_matrix(self) -> np.ndarray:
        """Replication coefficients stacked as a (K, B) matrix."""
        if self._coef_matrix is None:
            self._coef_matrix = np.column_stack([r.coefficients for r in self.replications])
        return self._coef_matrix


def _loo_error(a: np.ndarray, y: np.ndarray, coef: np.ndarray, var_y: float) -> float:
    """Relative leave-one-out error from the closed-form leverage identity."""
    resid = y - a @ coef
    q, _ = np.linalg.qr(a)
    h = np.einsum("ij,ij->i", q, q)
    denom = 1.0 - h
    if np.any(denom < 1e-9):
        return np.inf
    err = float(np.mean((resid / denom) ** 2))
    if var_y <= 0.0:
        return 0.0 if err < 1e-28 else np.inf
    return err / var_y


def _ols(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    coef, _, _, _ = np.linalg.lstsq(a, y, rcond=None)
    return coef


def _lars_order(a: np.ndarray, y: np.ndarray) -> list[int]:
    """Column activation order from a least-angle regression path."""
    from sklearn.linear_model import lars_path

    norms = np.linalg.norm(a, axis=0)
    keep = np.flatnonzero(norms > 1e-14)
    if len(keep) == 0:
        return []
    an = a[:, keep] / norms[keep]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, active, _ = lars_path(an, y - y.mean(), method="lar")
    return [int(keep[j]) for j in active]


def _check_fit_inputs(points, values):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    y = np.asarray(values, dtype=float).ravel()
    if len(y) < 3:
        raise ValueError("need at least 3 points to fit an expansion")
    if pts.shape[0] != len(y):
        raise ValueError("points and values must align")
    if not np.all(np.isfinite(y)):
        raise ValueError("values must be finite")
    return pts, y


def _prefix_select(phi: np.ndarray, y: np.ndarray, const_pos: int, cap: int):
    """LOO-scored least-squares refits over prefixes of a LARS ranking.

    ``phi`` holds the candidate columns (constant included); returns
    (loo, support positions, coefficients) of the best prefix model.
    """
    var_y = float(np.var(y, ddof=1))
    a0 = phi[:, [const_pos]]
    coef0 = _ols(a0, y)
    best = (_loo_error(a0, y, coef0, var_y), [const_pos], coef0)
    if var_y == 0.0:
        return best
    noncon = [c for c in range(phi.shape[1]) if c != const_pos]
    if not noncon:
        return best
    order = [noncon[j] for j in _lars_order(phi[:, noncon], y)]
    for m in range(1, min(len(order), cap) + 1):
        support = [const_pos] + order[:m]
        a = phi[:, support]
        coef = _ols(a, y)
        loo = _loo_error(a, y, coef, var_y)
        if loo < best[0] - 1e-12:
            best = (loo, support, coef)
    return best


def _fit_on_basis(pts: np.ndarray, y: np.ndarray, basis: BasisSpec, max_terms: int | None):
    """Degree-adaptive hybrid fit; returns (loo, support columns, coefficients
    on the support, activation pool of the winning degree)."""
    n = len(y)
    var_y = float(np.var(y, ddof=1))
    totals = basis.indices.sum(axis=1)
    const_col = int(np.flatnonzero(totals == 0)[0])
    if var_y == 0.0:
        phi0 = basis.subset([const_col]).design_matrix(pts[:1])[0, 0]
        return 0.0, [const_col], np.array([y[0] / phi0]), [const_col]

    phi = basis.design_matrix(pts)
    cap = n - 2 if max_terms is None else min(max_terms, n - 2)

    best = None  # (loo, support_cols, coef, pool)
    a0 = phi[:, [const_col]]
    coef0 = _ols(a0, y)
    best = (_loo_error(a0, y, coef0, var_y), [const_col], coef0, [const_col])
    for p in range(int(totals.max()) + 1):
        noncon = [c for c in np.flatnonzero(totals <= p) if c != const_col]
        if not noncon:
            continue
        order = [noncon[j] for j in _lars_order(phi[:, noncon], y)]
        for m in range(1, min(len(order), cap) + 1):
            support = [const_col] + order[:m]
            a = phi[:, support]
            coef = _ols(a, y)
            loo = _loo_error(a, y, coef, var_y)
            if loo < best[0] - 1e-12:
                best = (loo, support, coef, [const_col] + order[: min(len(order), cap)])
    return best


def fit_sparse_expansion(
    points,
    values,
    basis: BasisSpec,
    max_terms: int | None = None,
) -> PceExpansion:
    """Degree-adaptive sparse regression on the given basis.

    For each candidate degree p = 0..p_max the basis terms of total degree
    <= p are ranked by a least-angle regression path; every prefix of the
    ranking is refit by least squares and scored by relative leave-one-out
    error.  The expansion with the smallest LOO over all p wins, ties broken
    toward the smallest p / fewest terms.
    """
    pts, y = _check_fit_inputs(points, values)
    loo, support, coef, _ = _fit_on_basis(pts, y, basis, max_terms)
    support_sorted = sorted(support)
    lookup = {c: i for i, c in enumerate(support)}
    coef_sorted = np.array([coef[lookup[c]] for c in support_sorted])
    return PceExpansion(basis.subset(support_sorted), coef_sorted, float(loo))


BOOTSTRAP_MODES = ("path", "fixed", "full")


def bootstrap_fit(
    points,
    values,
    basis: BasisSpec,
    n_replications: int,
    rng: np.random.Generator,
    mode: str = "path",
    max_terms: int | None = None,
) -> BootstrapEnsemble:
    """Mean expansion on the full design plus B resampled replications.

    Replications are refit on n-out-of-n resamples with replacement.  In the
    default ``path`` mode each replication re-selects its sparse support by
    LOO along a least-angle ranking of the mean fit's activation pool, so the
    ensemble carries model-selection uncertainty as well as coefficient
    noise.  ``fixed`` refits coefficients on the mean's support only (fast),
    ``full`` reruns the entire degree-adaptive selection per replication.
    """
    if n_replications < 2:
        raise ValueError("need at least 2 bootstrap replications")
    if mode not in BOOTSTRAP_MODES:
        raise ValueError(f"unknown bootstrap mode {mode!r}")
    pts, y = _check_fit_inputs(points, values)
    n = len(y)

    loo, support, coef, pool = _fit_on_basis(pts, y, basis, max_terms)

    def resample() -> np.ndarray | None:
        for _attempt in range(10):
            idx = rng.integers(0, n, size=n)
            if len(np.unique(idx)) >= 2:
                return idx
        return None

    # Per-replication raw fits: (loo, support columns, coefficients) or None
    # for an unsalvageable resample (falls back to the mean coefficients).
    raw: list[tuple[float, list[int], np.ndarray] | None] = []
    if mode == "full":
        for _b in range(n_replications):
            idx = resample()
            if idx is None:
                raw.append(None)
                continue
            try:
                raw.append(_fit_on_basis(pts[idx], y[idx], basis, max_terms)[:3])
            except (ValueError, np.linalg.LinAlgError):
                raw.append(None)
        shared_cols = sorted(
            set(support).union(*[set(r[1]) for r in raw if r is not None] or [set()])
        )
    else:
        shared_cols = sorted(set(support if mode == "fixed" else pool) | set(support))

    shared = basis.subset(shared_cols)
    pos = {c: i for i, c in enumerate(shared_cols)}

    def embed(cols: list[int], values_on_cols: np.ndarray) -> np.ndarray:
        out = np.zeros(len(shared_cols))
        for c, a in zip(cols, values_on_cols):
            out[pos[c]] = a
        return out

    mean_coef = embed(support, coef)
    mean = PceExpansion(shared, mean_coef, float(loo))

    if mode != "full":
        phi_shared = shared.design_matrix(pts)
        const_pos = pos[support[0]]  # support always starts at the constant column
        cap = n - 2 if max_terms is None else min(max_terms, n - 2)
        for _b in range(n_replications):
            idx = resample()
            if idx is None:
                raw.append(None)
                continue
            if mode == "fixed":
                a = phi_shared[idx]
                rep_coef, _, rank, _ = np.linalg.lstsq(a, y[idx], rcond=None)
                if rank < a.shape[1]:
                    raw.append(None)
                    continue
                rloo = _loo_error(a, y[idx], rep_coef, float(np.var(y[idx], ddof=1)))
                raw.append((rloo if np.isfinite(rloo) else 0.0, list(shared_cols), rep_coef))
            else:
                rloo, rsupport, rcoef = _prefix_select(phi_shared[idx], y[idx], const_pos, cap)
                raw.append(
                    (
                        float(rloo) if np.isfinite(rloo) else 0.0,
                        [shared_cols[j] for j in rsupport],
                        rcoef,
                    )
                )

    reps = [
        PceExpansion(shared, mean_coef.copy(), float(loo))
        if r is None
        else PceExpansion(shared, embed(r[1], r[2]), float(r[0]))
        for r in raw
    ]
    return BootstrapEnsemble(mean, reps)


def evaluate_expansion(expansion: PceExpansion, points) -> np.ndarray:
    return expansion.evaluate(points)


def compute_envelope(
    model: InputModel,
    box,
    n_boundary: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Axis-aligned real-space box enveloping a quantile-space box's image.

    Samples the (M-1)-dimensional boundary of the quantile box uniformly
    (faces weighted by area), maps the points through the input model, and
    returns the per-dimension min/max bounding box.
    """
    box = np.asarray(box, dtype=float)
    m = box.shape[0]
    if n_boundary < 2 * m:
        raise ValueError("need at least 2*M boundary points")
    widths = box[:, 1] - box[:, 0]
    # Face areas: two faces per dimension, each the product of the other widths.
    face_area = np.repeat([np.prod(widths) / w if w > 0 else 0.0 for w in widths], 2)
    if face_area.sum() <= 0:
        raise ValueError("box is degenerate")
    face = rng.choice(2 * m, size=n_boundary, p=face_area / face_area.sum())
    u = box[:, 0] + rng.random((n_boundary, m)) * widths
    dims = face // 2
    sides = face % 2
    u[np.arange(n_boundary), dims] = box[dims, sides]
    x = model.quantile_to_real(u)
    return np.column_stack([x.min(axis=0), x.max(axis=0)])
