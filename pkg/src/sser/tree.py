"""Embedding tree of subdomains with residual expansions.

The tree partitions the unit hypercube into boxes.  Each node may carry a
bootstrap ensemble of expansions of the model residual on its box.  The
predictor at a point sums the mean expansions along the root-to-leaf path;
the b-th bootstrap predictor swaps in replication b at the leaf only, so
replications of a node are discarded once the node is split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .spectral import BasisSpec, BootstrapEnsemble, PceExpansion

Key = tuple[int, int]

ROOT_KEY: Key = (0, 1)


@dataclass(eq=False)
class DomainNode:
    key: Key
    box: np.ndarray  # (M, 2)
    ensemble: BootstrapEnsemble | None = None
    children: tuple[Key, Key] | tuple = ()
    split: tuple[int, float] | None = None  # (dimension, location)
    point_ids: list[int] = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return not self.children

    @property
    def level(self) -> int:
        return self.key[0]

    @property
    def mass(self) -> float:
        return float(np.prod(self.box[:, 1] - self.box[:, 0]))


class ExperimentalDesign:
    """Model evaluations: quantile/real coordinates, responses, and the
    residual of each point under the current tree predictor."""

    def __init__(self, dimension: int):
        self.u = np.empty((0, dimension))
        self.x = np.empty((0, dimension))
        self.g = np.empty(0)
        self.residual = np.empty(0)
        self.step = np.empty(0, dtype=int)

    def __len__(self) -> int:
        return len(self.g)

    def add(self, u, x, g, residual, step: int) -> np.ndarray:
        g = np.asarray(g, dtype=float).ravel()
        if not np.all(np.isfinite(g)):
            raise ValueError("limit-state values must be finite")
        ids = np.arange(len(self.g), len(self.g) + len(g))
        self.u = np.vstack([self.u, u])
        self.x = np.vstack([self.x, x])
        self.g = np.concatenate([self.g, g])
        self.residual = np.concatenate([self.residual, np.asarray(residual, dtype=float)])
        self.step = np.concatenate([self.step, np.full(len(g), step, dtype=int)])
        return ids


class SseTree:
    """Tree of subdomains in quantile space plus the experimental design.

    For expansions built in real coordinates (``real_envelope`` space) the
    tree needs the quantile-to-real ``transform`` to evaluate them.
    """

    def __init__(self, dimension: int, n_replications: int, transform=None):
        self.dimension = dimension
        self.n_replications = n_replications
        self.transform = transform
        root_box = np.column_stack([np.zeros(dimension), np.ones(dimension)])
        self.nodes: dict[Key, DomainNode] = {ROOT_KEY: DomainNode(ROOT_KEY, root_box)}
        self.terminal_keys: set[Key] = {ROOT_KEY}
        self._level_counter: dict[int, int] = {0: 2}
        self.design = ExperimentalDesign(dimension)

    # ---------------------------------------------------------------- layout

    def node(self, key: Key) -> DomainNode:
        return self.nodes[key]

    def terminal_items(self) -> list[DomainNode]:
        return [self.nodes[k] for k in sorted(self.terminal_keys)]

    def locate(self, points_u) -> list[Key]:
        """Terminal key containing each point (points on a cut go low)."""
        pts = np.atleast_2d(np.asarray(points_u, dtype=float))
        out = []
        for p in pts:
            node = self.nodes[ROOT_KEY]
            while node.children:
                d, v = node.split
                node = self.nodes[node.children[0] if p[d] <= v else node.children[1]]
            out.append(node.key)
        return out

    def split_node(self, key: Key, dimension: int, location: float) -> tuple[Key, Key]:
        """Split a terminal box at ``location`` along ``dimension``.

        Children share the cut face exactly; design points on the cut are
        assigned to the lower child.
        """
        node = self.nodes[key]
        if not node.terminal:
            raise ValueError(f"node {key} is not terminal")
        lo, hi = node.box[dimension]
        if not (lo < location < hi):
            raise ValueError("split location must lie strictly inside the box")
        level = node.level + 1
        start = self._level_counter.get(level, 1)
        self._level_counter[level] = start + 2
        keys = ((level, start), (level, start + 1))
        boxes = (node.box.copy(), node.box.copy())
        boxes[0][dimension, 1] = location
        boxes[1][dimension, 0] = location
        ids = np.asarray(node.point_ids, dtype=int)
        low = self.design.u[ids, dimension] <= location if len(ids) else np.empty(0, bool)
        for k, b, members in zip(keys, boxes, (ids[low], ids[~low]) if len(ids) else ([], [])):
            self.nodes[k] = DomainNode(k, b, point_ids=list(members))
        node.children = keys
        node.split = (dimension, float(location))
        self.terminal_keys.discard(key)
        self.terminal_keys.update(keys)
        return keys

    def add_points(self, u, x, g, step: int) -> np.ndarray:
        """Append evaluated points; the stored residual is g minus the current
        mean prediction, so the telescoping identity holds by construction."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        residual = np.asarray(g, dtype=float).ravel() - self.predict(u)
        ids = self.design.add(u, x, g, residual, step)
        for i, key in zip(ids, self.locate(u)):
            node = self.nodes[key]
            while True:
                node.point_ids.append(int(i))
                if node.key == ROOT_KEY:
                    break
                node = self.nodes[self._parent_of(node.key)]
        return ids

    def _parent_of(self, key: Key) -> Key:
        # Parents are sparse; scan the level above once and cache.
        if not hasattr(self, "_parents"):
            self._parents: dict[Key, Key] = {}
        if key not in self._parents:
            for k, n in self.nodes.items():
                for c in n.children:
                    self._parents[c] = k
        return self._parents[key]

    def attach_expansion(self, key: Key, ensemble: BootstrapEnsemble) -> None:
        """Store an ensemble on a terminal node and push residuals one level
        down for the design points in its box."""
        node = self.nodes[key]
        if not node.terminal:
            raise ValueError(f"node {key} is not terminal")
        if ensemble.n_replications != self.n_replications:
            raise ValueError("replication count does not match the tree")
        node.ensemble = ensemble
        if node.point_ids:
            ids = np.asarray(node.point_ids, dtype=int)
            pts = self._eval_coords(ids=ids, space=ensemble.mean.basis.space)
            self.design.residual[ids] -= ensemble.mean.evaluate(pts)

    def _eval_coords(self, ids=None, points_u=None, space: str = "quantile"):
        if space == "quantile":
            return self.design.u[ids] if ids is not None else points_u
        if self.transform is None:
            raise ValueError("real-space expansions require a transform")
        return self.design.x[ids] if ids is not None else self.transform(points_u)

    # ------------------------------------------------------------ prediction

    def _accumulate(self, pts_u: np.ndarray, want_reps: bool, selector, assigned=None):
        n = len(pts_u)
        base = np.zeros(n)
        term = np.zeros(n)
        reps = np.zeros((n, self.n_replications)) if want_reps else None
        real_pts = None
        stack = [(ROOT_KEY, np.arange(n))]
        while stack:
            key, idx = stack.pop()
            if len(idx) == 0:
                continue
            node = self.nodes[key]
            ens = node.ensemble
            if ens is not None:
                space = ens.mean.basis.space
                if space == "quantile":
                    pts = pts_u[idx]
                else:
                    if real_pts is None:
                        real_pts = self._eval_coords(points_u=pts_u, space=space)
                    pts = real_pts[idx]
                if node.terminal:
                    psi = ens.mean.basis.design_matrix(pts)
                    if want_reps:
                        term[idx] += psi @ ens.mean.coefficients
                        reps[idx] += psi @ ens.coef_matrix
                    elif assigned is not None:
                        ids = assigned[idx]
                        vals = np.empty(len(idx))
                        is_mean = ids < 0
                        if is_mean.any():
                            vals[is_mean] = psi[is_mean] @ ens.mean.coefficients
                        if (~is_mean).any():
                            vals[~is_mean] = np.einsum(
                                "nk,kn->n", psi[~is_mean], ens.coef_matrix[:, ids[~is_mean]]
                            )
                        term[idx] += vals
                    elif selector == "mean":
                        base[idx] += psi @ ens.mean.coefficients
                    else:
                        base[idx] += psi @ ens.replications[selector - 1].coefficients
                else:
                    base[idx] += ens.mean.evaluate(pts)
            if node.children:
                d, v = node.split
                low = pts_u[idx, d] <= v
                stack.append((node.children[0], idx[low]))
                stack.append((node.children[1], idx[~low]))
        return base, term, reps

    def predict(self, points_u, selector="mean") -> np.ndarray:
        """Predictor value at points: ``selector`` is ``"mean"`` or a
        1-based replication number."""
        pts = np.atleast_2d(np.asarray(points_u, dtype=float))
        if selector != "mean":
            b = int(selector)
            if not 1 <= b <= self.n_replications:
                raise ValueError("replication selector out of range")
            selector = b
        base, term, _ = self._accumulate(pts, want_reps=False, selector=selector)
        return base + term

    def predict_all(self, points_u) -> tuple[np.ndarray, np.ndarray]:
        """Mean prediction (n,) and all replication predictions (n, B)."""
        pts = np.atleast_2d(np.asarray(points_u, dtype=float))
        base, term, reps = self._accumulate(pts, want_reps=True, selector="mean")
        return base + term, reps + base[:, None]

    def predict_assigned(self, points_u, replication_ids) -> np.ndarray:
        """Per-point predictor selection: index b-1 for replication b, -1 for
        the mean predictor.  One tree traversal serves mixed selections."""
        pts = np.atleast_2d(np.asarray(points_u, dtype=float))
        ids = np.asarray(replication_ids, dtype=int)
        if ids.shape != (len(pts),):
            raise ValueError("replication_ids must align with points")
        if np.any(ids >= self.n_replications):
            raise ValueError("replication selector out of range")
        base, term, _ = self._accumulate(pts, want_reps=False, selector=None, assigned=ids)
        return base + term

    # Domain-local prediction: when all points are known to lie in one
    # terminal box, only the root-to-leaf ancestry matters, which avoids the
    # full-tree descent in the per-domain estimation hot paths.

    def ancestry(self, key: Key) -> list[Key]:
        """Keys from the root down to ``key``, inclusive."""
        if not hasattr(self, "_ancestry_cache"):
            self._ancestry_cache: dict[Key, list[Key]] = {}
        if key not in self._ancestry_cache:
            chain = [key]
            while chain[-1] != ROOT_KEY:
                chain.append(self._parent_of(chain[-1]))
            self._ancestry_cache[key] = chain[::-1]
        return self._ancestry_cache[key]

    def _domain_base(self, key: Key, pts_u: np.ndarray) -> np.ndarray:
        base = np.zeros(len(pts_u))
        for k in self.ancestry(key)[:-1]:
            ens = self.nodes[k].ensemble
            if ens is not None:
                pts = self._eval_coords(points_u=pts_u, space=ens.mean.basis.space)
                base += ens.mean.evaluate(pts)
        return base

    def predict_all_in(self, key: Key, points_u) -> tuple[np.ndarray, np.ndarray]:
        """Mean and replication predictions for points inside domain ``key``."""
        pts_u = np.atleast_2d(np.asarray(points_u, dtype=float))
        base = self._domain_base(key, pts_u)
        ens = self.nodes[key].ensemble
        if ens is None:
            return base, np.broadcast_to(base[:, None], (len(base), self.n_replications))
        pts = self._eval_coords(points_u=pts_u, space=ens.mean.basis.space)
        psi = ens.mean.basis.design_matrix(pts)
        return base + psi @ ens.mean.coefficients, base[:, None] + psi @ ens.coef_matrix

    def predict_assigned_in(self, key: Key, points_u, replication_ids) -> np.ndarray:
        """Domain-local variant of :meth:`predict_assigned`."""
        pts_u = np.atleast_2d(np.asarray(points_u, dtype=float))
        ids = np.asarray(replication_ids, dtype=int)
        base = self._domain_base(key, pts_u)
        ens = self.nodes[key].ensemble
        if ens is None:
            return base
        pts = self._eval_coords(points_u=pts_u, space=ens.mean.basis.space)
        psi = ens.mean.basis.design_matrix(pts)
        vals = np.empty(len(pts_u))
        is_mean = ids < 0
        if is_mean.any():
            vals[is_mean] = psi[is_mean] @ ens.mean.coefficients
        if (~is_mean).any():
            vals[~is_mean] = np.einsum(
                "nk,kn->n", psi[~is_mean], ens.coef_matrix[:, ids[~is_mean]]
            )
        return base + vals

    def misclassification_in(self, key: Key, points_u) -> np.ndarray:
        mean, reps = self.predict_all_in(key, points_u)
        return np.mean((mean <= 0.0)[:, None] != (reps <= 0.0), axis=1)

    def band_probability_in(self, key: Key, points_u, threshold: float) -> np.ndarray:
        _, reps = self.predict_all_in(key, points_u)
        return np.mean(np.abs(reps) <= threshold, axis=1)

    def misclassification_probability(self, points_u) -> np.ndarray:
        """Fraction of replications whose failure classification (g <= 0)
        disagrees with the mean predictor's, per point."""
        mean, reps = self.predict_all(points_u)
        return np.mean((mean <= 0.0)[:, None] != (reps <= 0.0), axis=1)

    def boundary_band_probability(self, points_u, threshold: float) -> np.ndarray:
        """Fraction of replications predicting within +-threshold of zero."""
        if threshold < 0:
            raise ValueError("threshold must be >= 0")
        _, reps = self.predict_all(points_u)
        return np.mean(np.abs(reps) <= threshold, axis=1)

    def band_threshold(self, sample_u, quantile: float) -> float:
        """Empirical ``quantile`` of |mean prediction| over the sample."""
        sample_u = np.atleast_2d(np.asarray(sample_u, dtype=float))
        if len(sample_u) < 100:
            raise ValueError("need at least 100 sample points")
        return float(np.quantile(np.abs(self.predict(sample_u)), quantile))

    # --------------------------------------------------------- serialization

    FORMAT = "sser-tree/1"

    def to_dict(self, include_replications: bool = False, extras: dict | None = None) -> dict:
        nodes = []
        extras = extras or {}
        for key in sorted(self.nodes):
            node = self.nodes[key]
            rec = {
                "key": list(key),
                "box": node.box.tolist(),
                "terminal": node.terminal,
                "children": [list(c) for c in node.children],
                "split": (
                    {"dimension": node.split[0], "location": node.split[1]}
                    if node.split
                    else None
                ),
                "mass": node.mass,
                "n_points": len(node.point_ids),
                "expansion": None,
            }
            if node.ensemble is not None:
                mean = node.ensemble.mean
                rec["expansion"] = {
                    "space": mean.basis.space,
                    "indices": mean.basis.indices.tolist(),
                    "center": mean.basis.center.tolist(),
                    "half_width": mean.basis.half_width.tolist(),
                    "coefficients": mean.coefficients.tolist(),
                    "loo_error": mean.loo_error,
                }
                if include_replications:
                    rec["expansion"]["replications"] = [
                        r.coefficients.tolist() for r in node.ensemble.replications
                    ]
            rec.update(extras.get(key, {}))
            nodes.append(rec)
        return {
            "format": self.FORMAT,
            "dimension": self.dimension,
            "n_replications": self.n_replications,
            "design_size": len(self.design),
            "nodes": nodes,
        }

    @classmethod
    def from_dict(cls, data: dict, transform=None) -> "SseTree":
        if data.get("format") != cls.FORMAT:
            raise ValueError(f"unsupported tree format {data.get('format')!r}")
        tree = cls(int(data["dimension"]), int(data["n_replications"]), transform=transform)
        tree.nodes = {}
        tree.terminal_keys = set()
        for rec in data["nodes"]:
            key = tuple(rec["key"])
            node = DomainNode(key, np.asarray(rec["box"], dtype=float))
            node.children = tuple(tuple(c) for c in rec["children"])
            if rec["split"]:
                node.split = (int(rec["split"]["dimension"]), float(rec["split"]["location"]))
            exp = rec.get("expansion")
            if exp is not None:
                basis = BasisSpec(
                    np.asarray(exp["indices"], dtype=int),
                    np.asarray(exp["center"], dtype=float),
                    np.asarray(exp["half_width"], dtype=float),
                    exp["space"],
                )
                mean = PceExpansion(basis, np.asarray(exp["coefficients"]), exp["loo_error"])
                reps = [
                    PceExpansion(basis, np.asarray(c), mean.loo_error)
                    for c in exp.get("replications", [])
                ]
                if not reps:
                    reps = [
                        PceExpansion(basis, mean.coefficients.copy(), mean.loo_error)
                        for _ in range(tree.n_replications)
                    ]
                node.ensemble = BootstrapEnsemble(mean, reps)
            tree.nodes[key] = node
            if node.terminal:
                tree.terminal_keys.add(key)
        return tree

    def save(self, path, include_replications: bool = False, extras: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(include_replications, extras), fh, sort_keys=True)

    @classmethod
    def load(cls, path, transform=None) -> "SseTree":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), transform=transform)


def terminal_mass_total(tree: SseTree) -> float:
    return float(sum(tree.nodes[k].mass for k in tree.terminal_keys))
