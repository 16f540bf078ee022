"""Biquadratic (Q2) displacement elements on the adaptive forest.

The nonlinear state problem is solved in condensed form: all hanging-node and
Dirichlet constraints are written as ``u = T u_free + g`` and the residual and
tangent are projected with ``T``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import mechanics
from .mechanics import MaterialParams
from .mesh import LEFT, RIGHT, TOP, ConstraintSet, Forest, NodeLayout, build_hanging_constraints

log = logging.getLogger(__name__)

__all__ = [
    "SolverError",
    "shape_eval",
    "gauss_rule",
    "Discretization",
    "DirichletBC",
    "Traction",
    "StateProblem",
    "Solution",
    "assemble",
    "total_energy",
    "solve_newton",
    "on_segment",
    "on_boundary",
]


class SolverError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


def _q2_1d(x):
    x = np.asarray(x, dtype=float)
    N = np.stack([0.5 * x * (x - 1.0), 1.0 - x * x, 0.5 * x * (x + 1.0)], axis=-1)
    dN = np.stack([x - 0.5, -2.0 * x, x + 0.5], axis=-1)
    return N, dN


def shape_eval(xi):
    """Q2 shape values ``(9,)`` and reference gradients ``(9, 2)`` at ``xi``.

    Node ``a + 3b`` sits at ``(a - 1, b - 1)`` in the reference square.
    """
    xi = np.asarray(xi, dtype=float)
    Nx, dNx = _q2_1d(xi[..., 0])
    Ny, dNy = _q2_1d(xi[..., 1])
    N = (Ny[..., :, None] * Nx[..., None, :]).reshape(xi.shape[:-1] + (9,))
    gx = (Ny[..., :, None] * dNx[..., None, :]).reshape(xi.shape[:-1] + (9,))
    gy = (dNy[..., :, None] * Nx[..., None, :]).reshape(xi.shape[:-1] + (9,))
    return N, np.stack([gx, gy], axis=-1)


def gauss_rule(n=3):
    x, w = np.polynomial.legendre.leggauss(n)
    X, Y = np.meshgrid(x, x, indexing="xy")
    WX, WY = np.meshgrid(w, w, indexing="xy")
    return np.stack([X.ravel(), Y.ravel()], axis=1), (WX * WY).ravel()


class Discretization:
    """Dof numbering, quadrature data and sparse pattern for one forest."""

    n_components = 2

    def __init__(self, forest: Forest, n_gauss: int = 3):
        self.forest = forest
        self.layout = NodeLayout(forest, degree=2)
        nodes = self.layout.cell_nodes
        self.cell_dofs = (2 * nodes[:, :, None] + np.arange(2)).reshape(len(nodes), 18)
        self.n_dofs = 2 * self.layout.n_nodes
        self.qp, self.qw = gauss_rule(n_gauss)
        N, dN = shape_eval(self.qp)
        self.N = N  # (nq, 9)
        h = forest.cell_size
        self.grads = dN[None, :, :, :] * (2.0 / h)[:, None, None, :]  # (nc, nq, 9, 2)
        self.wdet = self.qw[None, :] * (0.25 * h[:, 0] * h[:, 1])[:, None]
        rows = np.repeat(self.cell_dofs, 18, axis=1).ravel()
        cols = np.tile(self.cell_dofs, (1, 18)).ravel()
        lin = rows.astype(np.int64) * self.n_dofs + cols
        uniq, self._scatter = np.unique(lin, return_inverse=True)
        self._indices = (uniq % self.n_dofs).astype(np.int32)
        counts = np.bincount(uniq // self.n_dofs, minlength=self.n_dofs)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)

    @property
    def n_cells(self):
        return self.forest.n_active

    @cached_property
    def hanging(self) -> ConstraintSet:
        return build_hanging_constraints(self.forest, self.layout, n_components=2)

    @property
    def coords(self):
        return self.layout.coords

    def matrix(self, ke) -> sp.csr_matrix:
        data = np.bincount(self._scatter, weights=np.asarray(ke).ravel(), minlength=len(self._indices))
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(self.n_dofs, self.n_dofs))

    def vector(self, fe) -> np.ndarray:
        return np.bincount(self.cell_dofs.ravel(), weights=np.asarray(fe).ravel(), minlength=self.n_dofs)

    def deformation_gradient(self, u):
        ue = u[self.cell_dofs].reshape(-1, 9, 2)
        return np.eye(2) + np.einsum("eai,eqaJ->eqiJ", ue, self.grads)

    def interpolate(self, u, cell, xi):
        """Evaluate the displacement of ``cell`` at reference points ``xi``."""
        N, _ = shape_eval(np.atleast_2d(xi))
        return N @ u[self.cell_dofs[cell]].reshape(9, 2)


# ---------------------------------------------------------------------------
# boundary conditions

Selector = Callable[[Discretization], np.ndarray]


def on_boundary() -> Selector:
    def select(disc):
        return disc.layout.boundary_nodes
    return select


def on_segment(p0, p1, tol=1e-9) -> Selector:
    """Boundary nodes on the axis-aligned segment ``p0 -> p1``."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)

    def select(disc):
        nodes = disc.layout.boundary_nodes
        x = disc.coords[nodes]
        lo, hi = np.minimum(p0, p1) - tol, np.maximum(p0, p1) + tol
        inside = np.all((x >= lo) & (x <= hi), axis=1)
        return nodes[inside]
    return select


@dataclass
class DirichletBC:
    """Prescribe ``components`` of the displacement on the selected nodes.

    ``value`` is a constant or a callable mapping node coordinates ``(n, 2)``
    to displacements ``(n, 2)``.
    """

    select: Selector
    components: Sequence[int] = (0, 1)
    value: float | Callable = 0.0

    def constraints(self, disc: Discretization) -> ConstraintSet:
        cs = ConstraintSet()
        nodes = np.asarray(self.select(disc), dtype=int)
        if callable(self.value):
            vals = np.asarray(self.value(disc.coords[nodes]), dtype=float).reshape(len(nodes), 2)
        else:
            vals = np.full((len(nodes), 2), float(self.value))
        for n, v in zip(nodes, vals):
            for c in self.components:
                cs.add(2 * n + c, value=v[c])
        return cs


@dataclass
class Traction:
    """Constant line load ``t`` (force per length) on an axis-aligned boundary segment."""

    start: tuple
    end: tuple
    t: tuple

    def load_vector(self, disc: Discretization) -> np.ndarray:
        forest = disc.forest
        p0, p1 = np.asarray(self.start, float), np.asarray(self.end, float)
        t = np.asarray(self.t, float)
        axis = 0 if abs(p0[1] - p1[1]) < 1e-12 else 1  # running coordinate
        if abs(p0[1 - axis] - p1[1 - axis]) > 1e-12:
            raise ValueError("traction segment must be axis-aligned")
        s0, s1 = sorted((p0[axis], p1[axis]))
        line = p0[1 - axis]
        gx, gw = np.polynomial.legendre.leggauss(3)
        f = np.zeros(disc.n_dofs)
        tol = 1e-9 * max(forest.domain_width, forest.domain_height)
        for n, face in forest.boundary_faces:
            face_axis = 1 if face in (LEFT, RIGHT) else 0
            if face_axis != axis:
                continue
            o, h = forest.origin[n], forest.cell_size[n]
            pos = o[1 - axis] + (h[1 - axis] if face in (RIGHT, TOP) else 0.0)
            if abs(pos - line) > tol:
                continue
            a, b = o[axis], o[axis] + h[axis]
            lo, hi = max(a, s0), min(b, s1)
            if hi - lo <= tol:
                continue
            x = 0.5 * (hi + lo) + 0.5 * (hi - lo) * gx
            tt = 2.0 * (x - a) / h[axis] - 1.0
            N, _ = _q2_1d(tt)
            w = N.T @ (gw * 0.5 * (hi - lo))  # (3,)
            nodes = disc.layout.cell_nodes[n, disc.layout.face_local(face)]
            for node, wk in zip(nodes, w):
                f[2 * node : 2 * node + 2] += wk * t
        return f


# ---------------------------------------------------------------------------
# state problem


def simp(rho_hat, q, rho_min):
    rho_hat = np.asarray(rho_hat, float)
    g = rho_min + (1.0 - rho_min) * rho_hat**q
    dg = (1.0 - rho_min) * q * rho_hat ** (q - 1)
    return g, dg


@dataclass
class StateProblem:
    disc: Discretization
    rho_hat: np.ndarray
    material: MaterialParams = field(default_factory=MaterialParams)
    dirichlet: list = field(default_factory=list)
    tractions: list = field(default_factory=list)
    q: float = 3.0
    rho_min: float = 1e-6

    def __post_init__(self):
        self.rho_hat = np.asarray(self.rho_hat, float)
        if self.rho_hat.shape != (self.disc.n_cells,):
            raise ValueError("rho_hat must hold one value per active cell")
        if np.any(self.rho_hat < -1e-12) or np.any(self.rho_hat > 1 + 1e-12):
            raise ValueError("rho_hat must lie in [0, 1]")

    @property
    def forest(self):
        return self.disc.forest

    @cached_property
    def constraints(self) -> ConstraintSet:
        cs = ConstraintSet().merge(self.disc.hanging)
        for bc in self.dirichlet:
            cs.merge(bc.constraints(self.disc))
        return cs.close()

    @cached_property
    def condensation(self):
        return self.constraints.condensation(self.disc.n_dofs)

    @cached_property
    def f_ext(self) -> np.ndarray:
        f = np.zeros(self.disc.n_dofs)
        for tr in self.tractions:
            f += tr.load_vector(self.disc)
        return f

    @cached_property
    def stiffness_scale(self):
        return simp(self.rho_hat, self.q, self.rho_min)


def assemble(problem: StateProblem, u, tangent=True, load_factor=1.0):
    """Residual ``f_int(u) - load_factor*f_ext`` and tangent on the full dof set.

    Returns ``(r, K, inverted)``; when any quadrature point has ``det F <= 0``
    the residual is ``None`` and ``inverted`` is True.
    """
    disc = problem.disc
    u = np.asarray(u, float)
    F = disc.deformation_gradient(u)
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if np.any(~(J > 0)):
        return None, None, True
    g, _ = problem.stiffness_scale
    m = problem.material
    P = mechanics.piola_stress(F, m)
    wg = disc.wdet * g[:, None]
    re = np.einsum("eq,eqiJ,eqaJ->eai", wg, P, disc.grads)
    r = disc.vector(re) - load_factor * problem.f_ext
    K = None
    if tangent:
        A = mechanics.material_tangent(F, m)
        AG = np.einsum("eqiJkL,eqbL->eqiJbk", A, disc.grads)
        ke = np.einsum("eq,eqaJ,eqiJbk->eaibk", wg, disc.grads, AG, optimize=True)
        K = disc.matrix(ke.reshape(-1, 18, 18))
    return r, K, False


def total_energy(problem: StateProblem, u, load_factor=1.0):
    disc = problem.disc
    F = disc.deformation_gradient(np.asarray(u, float))
    W = mechanics.strain_energy(F, problem.material)
    g, _ = problem.stiffness_scale
    return float(np.sum(disc.wdet * g[:, None] * W) - load_factor * problem.f_ext @ u)


@dataclass
class Solution:
    u: np.ndarray
    converged: bool
    iterations: int
    residual_history: list
    load_steps: int = 1
    _K_free: sp.spmatrix | None = field(default=None, repr=False)
    _T: sp.spmatrix | None = field(default=None, repr=False)
    _lu: object = field(default=None, repr=False)

    def solve_tangent(self, rhs):
        """Solve ``K w = rhs`` on the constrained space (K: converged tangent).

        ``rhs`` is a full-length vector; the result is a full-length vector
        with homogeneous constraints distributed.
        """
        if self._lu is None:
            self._lu = _factor(self._K_free)
        rhs = np.atleast_2d(np.asarray(rhs, float).T).T
        w = self._lu.solve(np.ascontiguousarray(self._T.T @ rhs))
        out = self._T @ w
        return out[:, 0] if out.shape[1] == 1 else out


def _factor(K):
    return spla.splu(K.tocsc(), permc_spec="MMD_AT_PLUS_A")


def _reduce(T, K):
    return (T.T @ K @ T).tocsc()


def solve_newton(
    problem: StateProblem,
    load_steps: int = 1,
    u0=None,
    rtol: float = 1e-9,
    atol: float = 1e-12,
    max_iter: int = 50,
    max_bisections: int = 8,
    exact_tangent: bool = False,
) -> Solution:
    """Incremental Newton-Raphson with backtracking line search.

    Load factors ``s/load_steps`` scale both tractions and Dirichlet values.
    A failed increment is bisected; after ``max_bisections`` a
    :class:`SolverError` carrying the step index is raised.

    The returned solution can solve with the converged tangent. Unless
    ``exact_tangent`` is set, the factorisation of the last Newton step is
    reused when that step changed ``u`` by less than 1e-8 (relative).
    """
    if load_steps < 1:
        raise ValueError("load_steps must be >= 1")
    T, g, free = problem.condensation
    f_red = T.T @ problem.f_ext
    u_free = np.zeros(len(free)) if u0 is None else np.asarray(u0, float)[free].copy()
    pending = [s / load_steps for s in range(1, load_steps + 1)]
    done, bisections, step = 0.0, 0, 0
    history: list = []
    total_its = 0
    K = lu = None
    while pending:
        lam = pending[0]
        ok, u_try, K_try, lu_try, its = _newton_increment(
            problem, T, g, u_free, lam, f_red, rtol, atol, max_iter, history
        )
        total_its += its
        if ok:
            u_free, K, lu = u_try, K_try, lu_try
            done = lam
            pending.pop(0)
            step += 1
            continue
        bisections += 1
        if bisections > max_bisections:
            raise SolverError(f"Newton failed to converge in load step {step + 1}", step=step + 1)
        log.info("bisecting load increment %.4g -> %.4g", lam, 0.5 * (done + lam))
        pending.insert(0, 0.5 * (done + lam))
    u = T @ u_free + g
    return Solution(u, True, total_its, history, load_steps, _K_free=K, _T=T,
                    _lu=None if exact_tangent else lu)


def _newton_increment(problem, T, g, u_free, lam, f_red, rtol, atol, max_iter, history):
    tol = max(rtol * lam * np.linalg.norm(f_red), atol)
    u_free = u_free.copy()
    r, K, inverted = assemble(problem, T @ u_free + lam * g, load_factor=lam)
    if inverted:
        return False, None, None, None, 1
    R = T.T @ r
    nR = np.linalg.norm(R)
    lu = None
    for it in range(1, max_iter + 1):
        history.append(nR)
        Kr = _reduce(T, K)
        if nR <= tol:
            return True, u_free, Kr, lu, it
        lu = _factor(Kr)
        du = -lu.solve(R)
        small = np.linalg.norm(du) <= 1e-8 * max(np.linalg.norm(u_free), 1e-300)
        alpha = 1.0
        for _ in range(12):
            cand = u_free + alpha * du
            r_t, K_t, inv = assemble(problem, T @ cand + lam * g, load_factor=lam)
            if not inv:
                R_t = T.T @ r_t
                n_t = np.linalg.norm(R_t)
                if n_t < nR or n_t <= tol:
                    break
            alpha *= 0.5
        else:
            return False, None, None, None, it
        if not (small and alpha == 1.0):
            lu = None
        u_free, r, K, R, nR = cand, r_t, K_t, R_t, n_t
    return False, None, None, None, max_iter
