"""Configurational-force, density and stress based mesh adaptivity criteria.

Nodal configurational forces are assembled from the density-relaxed Eshelby
stress, ``F^I = sum_e int f_eps(rho_hat_e) Sigma . grad N^I dV``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import mechanics
from .fem import Discretization, Solution, SolverError, StateProblem
from .mesh import Flag, Forest, _children, _parent, build_hanging_constraints
from .regularization import eps_relax

__all__ = [
    "NodalForceField",
    "CriterionConfig",
    "configurational_forces",
    "assemble_configurational_forces",
    "flags_cnf",
    "flags_dens",
    "flags_vnm",
    "cell_von_mises",
    "compute_flags",
    "transfer_cell_field",
    "transfer_displacement",
    "transfer_fields",
]

CRITERIA = ("CNF", "DENS", "VNM")


@dataclass
class CriterionConfig:
    kind: str = "CNF"
    c_r: float = 0.25
    c_c: float = 0.01
    interval: int = 5
    dens_bounds: tuple = (0.2, 0.8, 0.01, 0.99)
    exclude_boundary: bool = False

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}, got {self.kind!r}")
        if not 0.0 <= self.c_c < self.c_r <= 1.0:
            raise ValueError("need 0 <= c_c < c_r <= 1")
        if int(self.interval) < 1:
            raise ValueError("interval must be >= 1")
        lo, hi, void, solid = self.dens_bounds
        if not 0.0 <= void < lo <= hi < solid <= 1.0:
            raise ValueError("density bounds must satisfy 0 <= void < lo <= hi < solid <= 1")


@dataclass
class NodalForceField:
    """Configurational force per Q2 node after hanging-node redistribution."""

    forces: np.ndarray  # (n_nodes, 2)
    disc: Discretization
    exclude_boundary: bool = False

    @property
    def magnitude(self):
        return np.linalg.norm(self.forces, axis=1)

    @cached_property
    def hanging_nodes(self):
        return _hanging_nodes(self.disc)

    @cached_property
    def valid(self):
        """Non-hanging cell vertices, the nodes on which criteria are evaluated."""
        mask = self.disc.layout.vertex_mask.copy()
        mask[self.hanging_nodes] = False
        return mask

    @property
    def F_max(self) -> float:
        mask = self.valid.copy()
        if self.exclude_boundary:
            mask[self.disc.layout.boundary_nodes] = False
        if not mask.any():
            return 0.0
        return float(self.magnitude[mask].max())

    def scaled(self, c):
        return NodalForceField(self.forces * c, self.disc, self.exclude_boundary)


def _hanging_nodes(disc: Discretization):
    return np.unique(disc.hanging.slaves // 2)


def assemble_configurational_forces(disc: Discretization, u, rho_hat, material, epsilon=0.1):
    """Raw nodal forces (n_nodes, 2) before hanging-node redistribution."""
    F = disc.deformation_gradient(np.asarray(u, float))
    Sigma = mechanics.eshelby_stress(F, material)
    w = disc.wdet * eps_relax(rho_hat, epsilon)[:, None]
    fe = np.einsum("eq,eqiJ,eqaJ->eai", w, Sigma, disc.grads)
    return disc.vector(fe).reshape(-1, 2)


def _redistribute(disc: Discretization, forces):
    out = forces.copy()
    for slave, pairs, _ in disc.hanging:
        for m, w in pairs:
            out.reshape(-1)[m] += w * forces.reshape(-1)[slave]
        out.reshape(-1)[slave] = 0.0
    return out


def configurational_forces(state: StateProblem, solution: Solution, epsilon=0.1,
                           exclude_boundary=False) -> NodalForceField:
    if not solution.converged:
        raise SolverError("configurational forces need a converged state")
    raw = assemble_configurational_forces(state.disc, solution.u, state.rho_hat, state.material, epsilon)
    return NodalForceField(_redistribute(state.disc, raw), state.disc, exclude_boundary)


def _keep(n):
    return np.full(n, int(Flag.KEEP), dtype=int)


def flags_cnf(field: NodalForceField, c_r=0.25, c_c=0.01, forest: Forest | None = None):
    """Refine a cell if any vertex reaches ``c_r F_max``; coarsen if all stay below ``c_c F_max``."""
    layout = field.disc.layout
    n = layout.forest.n_active if forest is None else forest.n_active
    F_max = field.F_max
    if not F_max > 0:
        return _keep(n)
    corners = layout.cell_nodes[:, layout.corner_local]
    mag = np.where(field.valid[corners], field.magnitude[corners], np.nan)
    vmax = np.nanmax(mag, axis=1)
    flags = _keep(n)
    flags[vmax <= c_c * F_max] = Flag.COARSEN
    flags[vmax >= c_r * F_max] = Flag.REFINE
    return flags


def flags_dens(rho_tilde, bounds=(0.2, 0.8, 0.01, 0.99)):
    lo, hi, void, solid = bounds
    rt = np.asarray(rho_tilde, float)
    flags = _keep(rt.size)
    flags[(rt <= void) | (rt >= solid)] = Flag.COARSEN
    flags[(rt >= lo) & (rt <= hi)] = Flag.REFINE
    return flags


def flags_vnm(sigma_vm_cell, c_r=0.25, c_c=0.01):
    s = np.asarray(sigma_vm_cell, float)
    flags = _keep(s.size)
    smax = s.max() if s.size else 0.0
    if not smax > 0:
        return flags
    flags[s <= c_c * smax] = Flag.COARSEN
    flags[s >= c_r * smax] = Flag.REFINE
    return flags


def cell_von_mises(state: StateProblem, u, epsilon=0.1):
    """Relaxed von Mises stress per cell (max over quadrature points)."""
    F = state.disc.deformation_gradient(np.asarray(u, float))
    svm = mechanics.von_mises(mechanics.cauchy_stress(F, state.material))
    return (eps_relax(state.rho_hat, epsilon)[:, None] * svm).max(axis=1)


def compute_flags(cfg: CriterionConfig, state: StateProblem, solution: Solution,
                  rho_tilde, epsilon=0.1):
    """Flags for the configured criterion plus the criterion's reference maximum."""
    if cfg.kind == "CNF":
        field = configurational_forces(state, solution, epsilon, cfg.exclude_boundary)
        return flags_cnf(field, cfg.c_r, cfg.c_c), field.F_max
    if cfg.kind == "DENS":
        return flags_dens(rho_tilde, cfg.dens_bounds), float(np.max(rho_tilde))
    svm = cell_von_mises(state, solution.u, epsilon)
    return flags_vnm(svm, cfg.c_r, cfg.c_c), float(svm.max())


# ---------------------------------------------------------------------------
# field transfer


def transfer_cell_field(old: Forest, new: Forest, values):
    """Map a per-cell field: children inherit, coarsened parents average by area."""
    values = np.asarray(values)
    out = np.empty((new.n_active,) + values.shape[1:], dtype=values.dtype if values.dtype.kind == "f" else float)
    old_idx = old.index
    areas = old.areas
    for n, key in enumerate(new.active):
        k = key
        while k is not None and k not in old_idx:
            k = _parent(k)
        if k is not None:
            out[n] = values[old_idx[k]]
            continue
        leaves = []
        stack = [key]
        while stack:
            c = stack.pop()
            if c in old_idx:
                leaves.append(old_idx[c])
            elif c[0] < old.max_level:
                stack.extend(_children(c))
        if not leaves:
            raise ValueError(f"cell {key} has no counterpart in the old forest")
        w = areas[leaves]
        out[n] = np.tensordot(w, values[leaves], axes=1) / w.sum()
    return out


def transfer_displacement(old_disc: Discretization, new_disc: Discretization, u_old):
    """Inject coincident nodes and interpolate the old Q2 field at new nodes."""
    u_old = np.asarray(u_old, float).reshape(-1, 2)
    old_layout, new_layout = old_disc.layout, new_disc.layout
    keys = new_layout.node_keys
    match = old_layout.lookup(keys)
    u_new = np.zeros((new_layout.n_nodes, 2))
    hit = match >= 0
    u_new[hit] = u_old[match[hit]]
    old = old_disc.forest
    for n in np.flatnonzero(~hit):
        X, Y = keys[n]
        cell = old.locate(X, Y)
        if cell is None:  # node on the upper/right domain edge
            cell = old.locate(X - 1, Y) or old.locate(X, Y - 1) or old.locate(X - 1, Y - 1)
        c = old.index[cell]
        o, s = old.int_origin[c], old.int_size[c]
        xi = 2.0 * (np.array([X, Y]) - o) / s - 1.0
        u_new[n] = old_disc.interpolate(u_old.reshape(-1), c, xi)[0]
    return u_new.reshape(-1)


def transfer_fields(old_forest: Forest, new_forest: Forest, rho_old, u_old=None,
                    old_disc: Discretization | None = None, new_disc: Discretization | None = None):
    """Transfer the raw density and a displacement warm start to ``new_forest``."""
    if new_forest.max_level != old_forest.max_level or new_forest.nx != old_forest.nx \
            or new_forest.ny != old_forest.ny:
        raise ValueError("forests do not share a base grid")
    rho_new = transfer_cell_field(old_forest, new_forest, np.asarray(rho_old, float))
    if u_old is None:
        return rho_new, None
    old_disc = old_disc or Discretization(old_forest)
    new_disc = new_disc or Discretization(new_forest)
    return rho_new, transfer_displacement(old_disc, new_disc, u_old)
