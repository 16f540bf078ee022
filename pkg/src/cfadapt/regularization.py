"""Density regularisation: Helmholtz PDE filter, smoothed Heaviside, eps-relaxation."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import gauss_rule
from .mesh import LEFT, RIGHT, Forest, NodeLayout, build_hanging_constraints

__all__ = [
    "HelmholtzFilter",
    "helmholtz_filter",
    "heaviside_project",
    "heaviside_derivative",
    "eps_relax",
    "eps_relax_derivative",
    "filter_length",
]


def filter_length(radius):
    """PDE length scale matching a linear (cone) filter of radius ``radius``."""
    return radius / (2.0 * np.sqrt(3.0))


def _q1_tables():
    qp, qw = gauss_rule(2)
    x, y = qp[:, 0], qp[:, 1]
    lx = np.stack([0.5 * (1 - x), 0.5 * (1 + x)], axis=1)
    ly = np.stack([0.5 * (1 - y), 0.5 * (1 + y)], axis=1)
    N = (ly[:, :, None] * lx[:, None, :]).reshape(-1, 4)
    dx = np.array([-0.5, 0.5])
    gx = (ly[:, :, None] * dx[None, None, :]).reshape(-1, 4)
    gy = (dx[None, :, None] * lx[:, None, :]).reshape(-1, 4)
    return N, np.stack([gx, gy], axis=-1), qw


class HelmholtzFilter:
    """Solve ``-l^2 lap(f) + f = rho`` with bilinear elements on a forest.

    ``l = radius / (2 sqrt 3)``. The Robin term ``kappa * int_dB f v`` with
    ``kappa = boundary_coeff * l`` is added on the domain boundary;
    ``boundary_coeff = 0`` gives the homogeneous Neumann filter. Cell values
    are read at centroids and clipped to [0, 1].
    """

    def __init__(self, forest: Forest, radius: float, boundary_coeff: float = 0.5):
        if not radius > 0:
            raise ValueError("filter radius must be positive")
        if boundary_coeff < 0:
            raise ValueError("boundary_coeff must be >= 0")
        self.forest = forest
        self.radius = float(radius)
        self.length = filter_length(radius)
        self.kappa = boundary_coeff * self.length
        self.layout = NodeLayout(forest, degree=1)
        nodes = self.layout.cell_nodes
        nc, nn = forest.n_active, self.layout.n_nodes

        N, dN, qw = _q1_tables()
        h = forest.cell_size
        det = 0.25 * h[:, 0] * h[:, 1]
        grads = dN[None] * (2.0 / h)[:, None, None, :]
        w = qw[None, :] * det[:, None]
        ke = self.length**2 * np.einsum("eq,eqaJ,eqbJ->eab", w, grads, grads)
        ke += np.einsum("eq,qa,qb->eab", w, N, N)
        rows = np.repeat(nodes, 4, axis=1).ravel()
        cols = np.tile(nodes, (1, 4)).ravel()
        A = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(nn, nn)).tocsr()

        if self.kappa > 0:
            br, bc, bv = [], [], []
            for n, f in forest.boundary_faces:
                L = h[n, 1] if f in (LEFT, RIGHT) else h[n, 0]
                fn = nodes[n, self.layout.face_local(f)]
                m = self.kappa * L / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
                br.extend(np.repeat(fn, 2))
                bc.extend(np.tile(fn, 2))
                bv.extend(m.ravel())
            A = A + sp.coo_matrix((bv, (br, bc)), shape=(nn, nn)).tocsr()

        areas = forest.areas
        cells = np.repeat(np.arange(nc), 4)
        # cell-constant load: int_e N_i = area/4; centroid sampling: 1/4 per corner
        self.B = sp.csr_matrix((np.repeat(areas / 4.0, 4), (nodes.ravel(), cells)), shape=(nn, nc))
        self.S = sp.csr_matrix((np.full(4 * nc, 0.25), (cells, nodes.ravel())), shape=(nc, nn))
        self.constraints = build_hanging_constraints(forest, self.layout)
        self.T, _, _ = self.constraints.condensation(nn)
        self.A = A
        self._lu = spla.splu((self.T.T @ A @ self.T).tocsc())

    def nodal(self, rho):
        rho = np.asarray(rho, float)
        return self.T @ self._lu.solve(self.T.T @ (self.B @ rho))

    def apply(self, rho):
        """Filtered density per cell (centroid value, clipped to [0, 1])."""
        return np.clip(self.S @ self.nodal(rho), 0.0, 1.0)

    def apply_unclipped(self, rho):
        return self.S @ self.nodal(rho)

    def transpose(self, v, rho=None):
        """Pull back a cell-wise sensitivity ``dR/d(rho_tilde)`` to ``dR/d(rho)``.

        With ``rho`` given, entries where the clip is active are zeroed.
        """
        v = np.asarray(v, float)
        if rho is not None:
            raw = self.apply_unclipped(rho)
            v = np.where((raw < 0.0) | (raw > 1.0), 0.0, v)
        return self.B.T @ (self.T @ self._lu.solve(self.T.T @ (self.S.T @ v)))


def helmholtz_filter(rho, r, boundary_coeff, forest):
    return HelmholtzFilter(forest, r, boundary_coeff).apply(rho)


def heaviside_project(rho_tilde, beta, eta=0.5):
    x = np.asarray(rho_tilde, float)
    den = np.tanh(beta * eta) + np.tanh(beta * (1.0 - eta))
    return (np.tanh(beta * eta) + np.tanh(beta * (x - eta))) / den


def heaviside_derivative(rho_tilde, beta, eta=0.5):
    x = np.asarray(rho_tilde, float)
    den = np.tanh(beta * eta) + np.tanh(beta * (1.0 - eta))
    return beta * (1.0 - np.tanh(beta * (x - eta)) ** 2) / den


def eps_relax(rho_hat, epsilon=0.1):
    r = np.asarray(rho_hat, float)
    return r / (epsilon * (1.0 - r) + r)


def eps_relax_derivative(rho_hat, epsilon=0.1):
    r = np.asarray(rho_hat, float)
    return epsilon / (epsilon * (1.0 - r) + r) ** 2


class DensityFields:
    """Raw, filtered and projected densities on one mesh."""

    def __init__(self, rho, rho_tilde, rho_hat):
        self.rho = rho
        self.rho_tilde = rho_tilde
        self.rho_hat = rho_hat


class DensityChain:
    """``rho -> rho_tilde -> rho_hat`` with the matching chain rule."""

    def __init__(self, filt: HelmholtzFilter, beta: float, eta: float = 0.5):
        if not beta > 0:
            raise ValueError("beta must be positive")
        if not 0.0 < eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")
        self.filter = filt
        self.beta = float(beta)
        self.eta = float(eta)

    def forward(self, rho) -> DensityFields:
        rho = np.asarray(rho, float)
        rt = self.filter.apply(rho)
        return DensityFields(rho, rt, heaviside_project(rt, self.beta, self.eta))

    def pullback(self, d_rho_hat, fields: DensityFields):
        dt = np.asarray(d_rho_hat) * heaviside_derivative(fields.rho_tilde, self.beta, self.eta)
        return self.filter.transpose(dt, fields.rho)
