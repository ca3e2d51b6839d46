"""Probabilistic input models.

A model is a list of one-dimensional marginals plus a copula (independent or
Gaussian).  It owns the bijective isoprobabilistic maps between the
M-dimensional unit-hypercube quantile space, where all partitioning happens,
and the physical (real) space where the limit-state function lives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import solve_triangular
from scipy.special import ndtr, ndtri

# Quantile coordinates are clipped to this open interval before applying a
# marginal ppf, so boundary points (which arise during envelope construction)
# never map to +-inf with unbounded marginals.
UNIT_EPS = 1e-12

FAMILIES = ("gaussian", "lognormal", "uniform", "truncated_gaussian")


@dataclass(frozen=True)
class Marginal:
    """One-dimensional marginal, parameterized by physical-space moments.

    ``mean`` and ``std`` are the mean and standard deviation of the physical
    variable, except for ``truncated_gaussian`` where they refer to the
    untruncated parent.  Lognormal parameters are moment-matched internally.
    """

    family: str
    mean: float
    std: float
    truncation: tuple[float | None, float | None] | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown marginal family {self.family!r}")
        if not (self.std > 0):
            raise ValueError("marginal std must be > 0")
        if self.family == "lognormal" and not (self.mean > 0):
            raise ValueError("lognormal requires a positive physical mean")
        if self.family == "truncated_gaussian":
            if self.truncation is None:
                raise ValueError("truncated_gaussian requires truncation bounds")
            lo, hi = self.truncation
            lo = -math.inf if lo is None else lo
            hi = math.inf if hi is None else hi
            if not lo < hi:
                raise ValueError("empty truncation interval")
        elif self.truncation is not None:
            raise ValueError(f"truncation not supported for family {self.family!r}")

    def _frozen(self):
        if self.family == "gaussian":
            return stats.norm(loc=self.mean, scale=self.std)
        if self.family == "lognormal":
            # Moment matching: (mean, std) of the physical variable to the
            # underlying normal parameters.
            sigma2 = math.log1p((self.std / self.mean) ** 2)
            mu = math.log(self.mean) - 0.5 * sigma2
            return stats.lognorm(s=math.sqrt(sigma2), scale=math.exp(mu))
        if self.family == "uniform":
            half = math.sqrt(3.0) * self.std
            return stats.uniform(loc=self.mean - half, scale=2.0 * half)
        # Truncated Gaussian: renormalized parent cdf, no rejection involved.
        lo, hi = self.truncation
        a = -math.inf if lo is None else (lo - self.mean) / self.std
        b = math.inf if hi is None else (hi - self.mean) / self.std
        return stats.truncnorm(a, b, loc=self.mean, scale=self.std)

    def ppf(self, p):
        """Inverse cdf; requires all probabilities strictly inside (0, 1)."""
        p = np.asarray(p, dtype=float)
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise ValueError("ppf requires probabilities in the open interval (0, 1)")
        return self._frozen().ppf(p)

    def cdf(self, x):
        return self._frozen().cdf(np.asarray(x, dtype=float))

    def support(self) -> tuple[float, float]:
        return self._frozen().support()


@dataclass(frozen=True, eq=False)
class CopulaModel:
    """Dependence structure: ``independent`` or ``gaussian`` with matrix R."""

    kind: str = "independent"
    correlation: np.ndarray | None = None
    cholesky: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("independent", "gaussian"):
            raise ValueError(f"unknown copula kind {self.kind!r}")
        if self.kind == "independent":
            if self.correlation is not None:
                raise ValueError("independent copula takes no correlation matrix")
            object.__setattr__(self, "cholesky", None)
            return
        r = np.asarray(self.correlation, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError("correlation must be a square matrix")
        if not np.allclose(r, r.T, atol=1e-12):
            raise ValueError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(r), 1.0, atol=1e-12):
            raise ValueError("correlation diagonal must be exactly 1")
        off = r[~np.eye(len(r), dtype=bool)]
        if np.any(np.abs(off) >= 1.0):
            raise ValueError("off-diagonal correlations must lie in (-1, 1)")
        try:
            chol = np.linalg.cholesky(r)
        except np.linalg.LinAlgError as exc:
            raise ValueError("correlation matrix is not positive definite") from exc
        object.__setattr__(self, "correlation", r)
        object.__setattr__(self, "cholesky", chol)


class InputModel:
    """Random input vector X: marginals plus copula.

    ``quantile_to_real`` and ``real_to_quantile`` are mutual inverses between
    (0,1)^M and the support of X.  For the Gaussian copula the map is the
    Rosenblatt construction with variables conditioned in declaration order
    (the ordering is part of the model definition).  The instance is immutable
    after construction and all operations are pure given an explicit RNG.
    """

    def __init__(self, marginals, copula: CopulaModel | None = None):
        self.marginals = tuple(marginals)
        if not self.marginals:
            raise ValueError("need at least one marginal")
        self.copula = copula if copula is not None else CopulaModel()
        if self.copula.kind == "gaussian" and len(self.copula.correlation) != len(self.marginals):
            raise ValueError("correlation matrix size does not match marginal count")

    @property
    def dimension(self) -> int:
        return len(self.marginals)

    def _check_points(self, pts, name: str) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[1] != self.dimension:
            raise ValueError(f"{name} must have {self.dimension} columns")
        return pts

    def quantile_to_real(self, u) -> np.ndarray:
        """Map points from the unit hypercube to the real space.

        Coordinates are clipped to [UNIT_EPS, 1-UNIT_EPS] first, so boundary
        points produce finite output.
        """
        u = self._check_points(u, "u")
        u = np.clip(u, UNIT_EPS, 1.0 - UNIT_EPS)
        if self.copula.kind == "gaussian":
            z = ndtri(u) @ self.copula.cholesky.T
            u = ndtr(z)
            u = np.clip(u, UNIT_EPS, 1.0 - UNIT_EPS)
        x = np.empty_like(u)
        for i, m in enumerate(self.marginals):
            x[:, i] = m.ppf(u[:, i])
        return x

    def real_to_quantile(self, x) -> np.ndarray:
        """Inverse of :meth:`quantile_to_real`; x must lie in the support."""
        x = self._check_points(x, "x")
        u = np.empty_like(x)
        for i, m in enumerate(self.marginals):
            lo, hi = m.support()
            if np.any(x[:, i] < lo) or np.any(x[:, i] > hi):
                raise ValueError(f"points outside support of marginal {i}")
            u[:, i] = m.cdf(x[:, i])
        if self.copula.kind == "gaussian":
            z = ndtri(np.clip(u, UNIT_EPS, 1.0 - UNIT_EPS))
            z_indep = solve_triangular(self.copula.cholesky, z.T, lower=True).T
            u = ndtr(z_indep)
        return u

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n i.i.d. samples from X, via uniform quantile-space sampling."""
        if n < 1:
            raise ValueError("n must be >= 1")
        return self.quantile_to_real(rng.random((n, self.dimension)))

    # Configuration-file construction (see cli module for the schema).

    @classmethod
    def from_dict(cls, spec: dict) -> "InputModel":
        margs = []
        for block in spec["variables"]:
            trunc = block.get("truncation")
            margs.append(
                Marginal(
                    family=str(block["family"]).lower(),
                    mean=float(block["mean"]),
                    std=float(block["std"]),
                    truncation=tuple(trunc) if trunc is not None else None,
                    name=block.get("name", ""),
                )
            )
        corr = spec.get("correlation")
        copula = (
            CopulaModel("gaussian", np.asarray(corr, dtype=float))
            if corr is not None
            else CopulaModel()
        )
        return cls(margs, copula)

    def to_dict(self) -> dict:
        out = {
            "variables": [
                {
                    "name": m.name,
                    "family": m.family,
                    "mean": m.mean,
                    "std": m.std,
                    "truncation": list(m.truncation) if m.truncation else None,
                }
                for m in self.marginals
            ]
        }
        if self.copula.kind == "gaussian":
            out["correlation"] = self.copula.correlation.tolist()
        return out
