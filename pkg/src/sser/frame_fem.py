"""Small direct-stiffness solver for 2-D elastic frames.

Euler-Bernoulli frame elements (axial + bending, 3 DOF per node), assembled
per element-property type so that batches of random (E, A, I) samples can be
solved with vectorized linear algebra.  Used by the five-story frame
benchmark; shear deformation is neglected, consistent with that benchmark's
lineage (Liu & Der Kiureghian, 1991).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FT = 0.3048  # meters per foot


@dataclass(eq=False)
class FrameModel:
    """Frame topology: node coordinates, elements tagged by property type,
    fixed (fully clamped) nodes, load carriers, and the output DOF."""

    nodes: np.ndarray  # (n_nodes, 2) coordinates in meters
    elements: list[tuple[int, int, int]]  # (node_i, node_j, type_id)
    n_types: int
    fixed_nodes: tuple[int, ...]
    load_entries: list[tuple[int, int]]  # (global dof, load slot): F[dof] += P[slot]
    output_dof: int  # global dof whose displacement is reported


def _element_unit_matrices(xi: np.ndarray, xj: np.ndarray):
    """Global-frame 6x6 stiffness for unit EA and unit EI."""
    dx, dy = xj - xi
    length = float(np.hypot(dx, dy))
    if length <= 0:
        raise ValueError("zero-length element")
    c, s = dx / length, dy / length

    ka = np.zeros((6, 6))
    ka[0, 0] = ka[3, 3] = 1.0 / length
    ka[0, 3] = ka[3, 0] = -1.0 / length

    l2, l3 = length**2, length**3
    kb = np.zeros((6, 6))
    rows = (1, 2, 4, 5)
    vals = np.array(
        [
            [12 / l3, 6 / l2, -12 / l3, 6 / l2],
            [6 / l2, 4 / length, -6 / l2, 2 / length],
            [-12 / l3, -6 / l2, 12 / l3, -6 / l2],
            [6 / l2, 2 / length, -6 / l2, 4 / length],
        ]
    )
    for a, ra in enumerate(rows):
        for b, rb in enumerate(rows):
            kb[ra, rb] = vals[a, b]

    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    t = np.zeros((6, 6))
    t[:3, :3] = rot
    t[3:, 3:] = rot
    return t.T @ ka @ t, t.T @ kb @ t


class FrameSolver:
    """Batched linear-static solver for a :class:`FrameModel`.

    The global stiffness is a linear combination of per-type constant
    matrices scaled by the sampled EA and EI values, so assembly and solve
    vectorize over samples.
    """

    def __init__(self, model: FrameModel, chunk_size: int = 512):
        self.model = model
        self.chunk_size = chunk_size
        n_dof = 3 * len(model.nodes)
        h_ea = np.zeros((model.n_types, n_dof, n_dof))
        h_ei = np.zeros((model.n_types, n_dof, n_dof))
        for i, j, t in model.elements:
            ka, kb = _element_unit_matrices(model.nodes[i], model.nodes[j])
            dofs = np.r_[3 * i : 3 * i + 3, 3 * j : 3 * j + 3]
            h_ea[t][np.ix_(dofs, dofs)] += ka
            h_ei[t][np.ix_(dofs, dofs)] += kb

        fixed = np.zeros(n_dof, dtype=bool)
        for node in model.fixed_nodes:
            fixed[3 * node : 3 * node + 3] = True
        self.free = np.flatnonzero(~fixed)
        self.fixed = np.flatnonzero(fixed)
        self._h_ea_full = h_ea
        self._h_ei_full = h_ei
        self.h_ea = h_ea[:, self.free[:, None], self.free[None, :]]
        self.h_ei = h_ei[:, self.free[:, None], self.free[None, :]]
        pos = {d: i for i, d in enumerate(self.free)}
        self.load_rows = [(pos[dof], slot) for dof, slot in model.load_entries]
        if model.output_dof not in pos:
            raise ValueError("output dof is constrained")
        self.out_row = pos[model.output_dof]

    def _solve_free(self, ea: np.ndarray, ei: np.ndarray, loads: np.ndarray) -> np.ndarray:
        n = len(ea)
        n_free = len(self.free)
        rhs = np.zeros((n, n_free))
        for row, slot in self.load_rows:
            rhs[:, row] += loads[:, slot]
        out = np.empty((n, n_free))
        for start in range(0, n, self.chunk_size):
            sl = slice(start, min(start + self.chunk_size, n))
            k = np.einsum("nt,tij->nij", ea[sl], self.h_ea) + np.einsum(
                "nt,tij->nij", ei[sl], self.h_ei
            )
            try:
                out[sl] = np.linalg.solve(k, rhs[sl])
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(
                    f"singular frame stiffness in sample batch {sl}: {exc}"
                ) from exc
        return out

    def output_displacement(self, ea, ei, loads) -> np.ndarray:
        """Displacement at the output DOF for each sample row."""
        ea = np.atleast_2d(np.asarray(ea, dtype=float))
        ei = np.atleast_2d(np.asarray(ei, dtype=float))
        loads = np.atleast_2d(np.asarray(loads, dtype=float))
        if np.any(ea <= 0) or np.any(ei <= 0):
            raise ValueError("stiffness inputs must be positive")
        return self._solve_free(ea, ei, loads)[:, self.out_row]

    def solve_full(self, ea, ei, loads):
        """Full displacement vector and support reactions for one sample.

        Reactions are K_full @ u minus the applied loads at the fixed DOFs;
        used to verify static equilibrium.
        """
        ea = np.asarray(ea, dtype=float).ravel()
        ei = np.asarray(ei, dtype=float).ravel()
        loads = np.asarray(loads, dtype=float).ravel()
        u_free = self._solve_free(ea[None], ei[None], loads[None])[0]
        n_dof = self._h_ea_full.shape[1]
        u = np.zeros(n_dof)
        u[self.free] = u_free
        k_full = np.einsum("t,tij->ij", ea, self._h_ea_full) + np.einsum(
            "t,tij->ij", ei, self._h_ei_full
        )
        f_applied = np.zeros(n_dof)
        for dof, slot in self.model.load_entries:
            f_applied[dof] += loads[slot]
        reactions = (k_full @ u) - f_applied
        return u, reactions


# --------------------------------------------------------------- five-story

# Element-property types, indexed 0..7: beams B1..B4, then columns C1..C4.
B1, B2, B3, B4, C1, C2, C3, C4 = range(8)

# Geometry transcribed from the benchmark's primary source (Liu &
# Der Kiureghian 1991: three-bay five-story frame).  Bays of 25, 30 and 25 ft;
# a 16 ft bottom story under four 12 ft stories.  The three lateral loads act
# at the top three floor levels on the windward column line.  The beam/column
# type layout below reproduces the published reference failure probability;
# see scripts/compute_references.py for the recorded verification run.
BAY_WIDTHS_FT = (25.0, 30.0, 25.0)
STORY_HEIGHTS_FT = (16.0, 12.0, 12.0, 12.0, 12.0)
LOAD_FLOORS = (5, 4, 3)  # slots P1, P2, P3, floor number counted from 1

# Column type per (story 1..5, line 0..3): exterior lines 0/3, interior 1/2.
COLUMN_TYPES = {
    (story, line): (
        (C1 if line in (0, 3) else C2)
        if story >= 4
        else (C3 if line in (0, 3) else C4)
    )
    for story in range(1, 6)
    for line in range(4)
}

# Beam type per floor 1..5 (floor 5 is the roof).
BEAM_TYPES = {1: B4, 2: B4, 3: B3, 4: B2, 5: B1}


def five_story_frame_model(
    segments_per_member: int = 1,
    load_floors: tuple[int, int, int] = LOAD_FLOORS,
    column_types: dict | None = None,
    beam_types: dict | None = None,
) -> FrameModel:
    """Assemble the five-story three-bay frame topology.

    ``segments_per_member`` subdivides every member; with nodal loads the
    Euler-Bernoulli solution is mesh independent, which the tests exercise.
    """
    column_types = COLUMN_TYPES if column_types is None else column_types
    beam_types = BEAM_TYPES if beam_types is None else beam_types
    xs = np.concatenate([[0.0], np.cumsum(BAY_WIDTHS_FT)]) * FT
    ys = np.concatenate([[0.0], np.cumsum(STORY_HEIGHTS_FT)]) * FT

    nodes: list[tuple[float, float]] = []
    index: dict[tuple[float, float], int] = {}

    def node_id(x: float, y: float) -> int:
        key = (round(x, 9), round(y, 9))
        if key not in index:
            index[key] = len(nodes)
            nodes.append((x, y))
        return index[key]

    elements: list[tuple[int, int, int]] = []

    def add_member(p0, p1, type_id):
        for s in range(segments_per_member):
            a = np.asarray(p0) + (np.asarray(p1) - np.asarray(p0)) * s / segments_per_member
            b = np.asarray(p0) + (np.asarray(p1) - np.asarray(p0)) * (s + 1) / segments_per_member
            elements.append((node_id(*a), node_id(*b), type_id))

    for story in range(1, 6):
        for line in range(4):
            add_member(
                (xs[line], ys[story - 1]), (xs[line], ys[story]), column_types[(story, line)]
            )
    for floor in range(1, 6):
        for bay in range(3):
            add_member((xs[bay], ys[floor]), (xs[bay + 1], ys[floor]), beam_types[floor])

    fixed = tuple(node_id(x, 0.0) for x in xs)
    load_entries = [
        (3 * node_id(xs[0], ys[floor]) + 0, slot) for slot, floor in enumerate(load_floors)
    ]
    output_dof = 3 * node_id(xs[0], ys[5]) + 0
    return FrameModel(
        nodes=np.asarray(nodes, dtype=float),
        elements=elements,
        n_types=8,
        fixed_nodes=fixed,
        load_entries=load_entries,
        output_dof=output_dof,
    )


def split_inputs(x: np.ndarray):
    """Map the 21 random inputs onto per-type (EA, EI) products and loads.

    Input layout: P1..P3, E4, E5, I6..I13, A14..A21.  Beams B1..B4 use E4
    with (I10..I13, A18..A21); columns C1..C4 use E5 with (I6..I9, A14..A17).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != 21:
        raise ValueError("frame inputs must have 21 columns")
    loads = x[:, 0:3]
    e4, e5 = x[:, 3], x[:, 4]
    inertia = x[:, 5:13]  # I6..I13
    area = x[:, 13:21]  # A14..A21
    ea = np.empty((len(x), 8))
    ei = np.empty((len(x), 8))
    ea[:, B1:B4 + 1] = e4[:, None] * area[:, 4:8]  # A18..A21
    ei[:, B1:B4 + 1] = e4[:, None] * inertia[:, 4:8]  # I10..I13
    ea[:, C1:C4 + 1] = e5[:, None] * area[:, 0:4]  # A14..A17
    ei[:, C1:C4 + 1] = e5[:, None] * inertia[:, 0:4]  # I6..I9
    return ea, ei, loads


_SOLVER: FrameSolver | None = None


def default_solver() -> FrameSolver:
    global _SOLVER
    if _SOLVER is None:
        _SOLVER = FrameSolver(five_story_frame_model())
    return _SOLVER


def frame_top_displacement(x) -> np.ndarray:
    """Top-floor horizontal displacement (meters) for 21-column input rows."""
    ea, ei, loads = split_inputs(x)
    return default_solver().output_displacement(ea, ei, loads)
