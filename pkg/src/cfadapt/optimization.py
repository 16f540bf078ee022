"""Responses, adjoint sensitivities and the moving-asymptotes design update."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import mechanics
from .fem import Solution, StateProblem
from .regularization import DensityChain, DensityFields, eps_relax, eps_relax_derivative

log = logging.getLogger(__name__)

__all__ = [
    "OptProblem",
    "Sensitivities",
    "compliance",
    "volume_constraint",
    "pnorm_stress",
    "pnorm_aggregate",
    "pnorm_terms",
    "relaxed_von_mises",
    "sensitivities",
    "MMA",
]

KINDS = ("compliance_volume", "compliance_volume_stress")


@dataclass
class OptProblem:
    kind: str = "compliance_volume"
    volume_bound: float = 1.0
    stress_limit: float | None = None
    p: float = 8.0
    epsilon: float = 0.1
    move: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if not self.volume_bound > 0:
            raise ValueError("volume bound must be positive")
        if self.has_stress:
            if self.stress_limit is None or not self.stress_limit > 0:
                raise ValueError("stress limit must be positive")
            if self.p < 2:
                raise ValueError("P-norm exponent must be >= 2")

    @property
    def has_stress(self):
        return self.kind == "compliance_volume_stress"


@dataclass
class Sensitivities:
    compliance: np.ndarray
    volume: np.ndarray
    pnorm: np.ndarray | None = None


def _require(solution):
    if not solution.converged:
        from .fem import SolverError

        raise SolverError("response requested on an unconverged state")


def compliance(state: StateProblem, solution: Solution) -> float:
    """Work of the boundary tractions on the converged displacement."""
    _require(solution)
    return float(state.f_ext @ solution.u)


def volume_constraint(rho, forest, Vbar) -> float:
    return float(np.dot(np.asarray(rho, float), forest.areas) - Vbar)


def relaxed_von_mises(state: StateProblem, u, epsilon=0.1):
    """``f_eps(rho_hat) * sigma_vm`` at every quadrature point, shape (cells, qp).

    The stress is that of the solid material at the current deformation.
    """
    F = state.disc.deformation_gradient(u)
    svm = mechanics.von_mises(mechanics.cauchy_stress(F, state.material))
    return eps_relax(state.rho_hat, epsilon)[:, None] * svm


def pnorm_aggregate(values, weights, p):
    """``[sum(w s^p) / sum(w)]^(1/p)`` for non-negative ``values``."""
    values = np.asarray(values, float)
    weights = np.asarray(weights, float)
    return float((np.sum(weights * values**p) / np.sum(weights)) ** (1.0 / p))


def pnorm_terms(state: StateProblem, u, sigma_a, p, epsilon):
    """Volume-normalised P-norm of ``f_eps * sigma_vm / sigma_a``.

    Returns ``(G, dG/du, dG/d(rho_hat) at fixed u)``.
    """
    disc = state.disc
    F = disc.deformation_gradient(u)
    svm, dsvm = mechanics.von_mises_derivative(F, state.material)
    fe = eps_relax(state.rho_hat, epsilon)
    dfe = eps_relax_derivative(state.rho_hat, epsilon)
    sN = fe[:, None] * svm / sigma_a
    V = disc.wdet.sum()
    integral = float(np.sum(disc.wdet * sN**p)) / V
    G = integral ** (1.0 / p)
    if G == 0.0:
        return 0.0, np.zeros(disc.n_dofs), np.zeros(disc.n_cells)
    dG_dsN = G ** (1.0 - p) * disc.wdet * sN ** (p - 1) / V
    dG_dF = (dG_dsN * fe[:, None] / sigma_a)[..., None, None] * dsvm
    du = disc.vector(np.einsum("eqiJ,eqaJ->eai", dG_dF, disc.grads))
    drho = np.sum(dG_dsN * dfe[:, None] * svm / sigma_a, axis=1)
    return G, du, drho


def pnorm_stress(state: StateProblem, solution: Solution, sigma_a, p=8.0, epsilon=0.1) -> float:
    _require(solution)
    if not sigma_a > 0:
        raise ValueError("stress limit must be positive")
    return pnorm_terms(state, solution.u, sigma_a, p, epsilon)[0]


def _internal_force_solid(state: StateProblem, u):
    """Per-cell internal force of the unscaled material, shape (cells, 18)."""
    disc = state.disc
    F = disc.deformation_gradient(u)
    P = mechanics.piola_stress(F, state.material)
    return np.einsum("eq,eqiJ,eqaJ->eai", disc.wdet, P, disc.grads).reshape(-1, 18)


def sensitivities(state: StateProblem, solution: Solution, problem: OptProblem,
                  chain: DensityChain | None = None, fields: DensityFields | None = None,
                  forest=None) -> Sensitivities:
    """Adjoint gradients with respect to the raw design variables.

    Without ``chain`` the gradients are returned with respect to ``rho_hat``.
    """
    _require(solution)
    u = solution.u
    disc = state.disc
    _, dg = state.stiffness_scale
    fint = _internal_force_solid(state, u)
    rhs = [state.f_ext]
    if problem.has_stress:
        G, dGdu, dGdr = pnorm_terms(state, u, problem.stress_limit, problem.p, problem.epsilon)
        rhs.append(dGdu)
    lam = solution.solve_tangent(np.stack(rhs, axis=1))
    lam = lam.reshape(disc.n_dofs, -1)

    def explicit(adj):
        return -dg * np.einsum("ea,ea->e", adj[disc.cell_dofs], fint)

    dc = explicit(lam[:, 0])
    dp = dGdr + explicit(lam[:, 1]) if problem.has_stress else None
    forest = forest if forest is not None else disc.forest
    if chain is not None:
        dc = chain.pullback(dc, fields)
        dp = chain.pullback(dp, fields) if dp is not None else None
    return Sensitivities(dc, forest.areas.copy(), dp)


class MMA:
    """Method of moving asymptotes (Svanberg) for ``min f0 s.t. g_i <= 0``
    on box bounds, with an additional move limit.
    """

    def __init__(self, move=0.2, xmin=0.0, xmax=1.0, asyinit=0.5, asyincr=1.2,
                 asydecr=0.7, albefa=0.1, c=1000.0, d=1.0, a0=1.0):
        self.move = move
        self.xmin, self.xmax = xmin, xmax
        self.asyinit, self.asyincr, self.asydecr = asyinit, asyincr, asydecr
        self.albefa = albefa
        self.c, self.d, self.a0 = c, d, a0
        self.iteration = 0
        self.xold1 = self.xold2 = self.low = self.upp = None
        self.last_fallback = False

    def memory(self):
        return {"xold1": self.xold1, "xold2": self.xold2, "low": self.low, "upp": self.upp}

    def remap(self, transfer):
        """Map the per-variable memory to a new design space (``transfer(array)``)."""
        for name, arr in self.memory().items():
            if arr is not None:
                setattr(self, name, transfer(arr))

    def update(self, x, f0, df0, g, dg):
        x = np.asarray(x, float)
        df0 = np.asarray(df0, float)
        g = np.atleast_1d(np.asarray(g, float))
        dg = np.atleast_2d(np.asarray(dg, float))
        n, m = x.size, g.size
        self.iteration += 1
        xmin = np.full(n, float(self.xmin))
        xmax = np.full(n, float(self.xmax))
        span = np.maximum(xmax - xmin, 1e-5)
        if self.iteration <= 2 or self.xold2 is None or self.low is None:
            low = x - self.asyinit * span
            upp = x + self.asyinit * span
        else:
            zzz = (x - self.xold1) * (self.xold1 - self.xold2)
            factor = np.ones(n)
            factor[zzz > 0] = self.asyincr
            factor[zzz < 0] = self.asydecr
            low = x - factor * (self.xold1 - self.low)
            upp = x + factor * (self.upp - self.xold1)
            low = np.clip(low, x - 10.0 * span, x - 0.01 * span)
            upp = np.clip(upp, x + 0.01 * span, x + 10.0 * span)
        alfa = np.maximum.reduce([low + self.albefa * (x - low), x - self.move * span, xmin])
        beta = np.minimum.reduce([upp - self.albefa * (upp - x), x + self.move * span, xmax])

        raa0 = 1e-5
        ux2 = (upp - x) ** 2
        xl2 = (x - low) ** 2
        p0 = np.maximum(df0, 0.0)
        q0 = np.maximum(-df0, 0.0)
        pq0 = 0.001 * (p0 + q0) + raa0 / span
        p0 = (p0 + pq0) * ux2
        q0 = (q0 + pq0) * xl2
        P = np.maximum(dg, 0.0)
        Q = np.maximum(-dg, 0.0)
        PQ = 0.001 * (P + Q) + raa0 / span[None, :]
        P = (P + PQ) * ux2[None, :]
        Q = (Q + PQ) * xl2[None, :]
        b = P @ (1.0 / (upp - x)) + Q @ (1.0 / (x - low)) - g

        self.last_fallback = False
        finite = np.all(np.isfinite(df0)) and np.all(np.isfinite(dg)) and np.all(np.isfinite(g))
        try:
            if not finite:
                raise FloatingPointError("non-finite gradient or constraint value")
            if not np.any(df0) and not np.any(dg) and np.all(g <= 0):
                xnew = x.copy()  # nothing to act on
            else:
                xnew = _subsolv(m, n, low, upp, alfa, beta, p0, q0, P, Q, self.a0,
                                np.zeros(m), b, np.full(m, self.c), np.full(m, self.d))
            if not np.all(np.isfinite(xnew)):
                raise FloatingPointError("non-finite subproblem solution")
        except (np.linalg.LinAlgError, FloatingPointError) as exc:
            log.warning("MMA subproblem failed (%s); projected steepest-descent step", exc)
            self.last_fallback = True
            d0 = np.nan_to_num(df0, nan=0.0, posinf=0.0, neginf=0.0)
            step = d0 / max(np.abs(d0).max(), 1e-300) * self.move
            xnew = np.clip(x - step, alfa, beta)
        xnew = np.clip(xnew, alfa, beta)
        self.xold2 = self.xold1 if self.xold1 is not None else x.copy()
        self.xold1 = x.copy()
        self.low, self.upp = low, upp
        return xnew


def _subsolv(m, n, low, upp, alfa, beta, p0, q0, P, Q, a0, a, b, c, d, epsimin=1e-9):
    """Primal-dual interior point solution of the MMA subproblem."""
    een, eem = np.ones(n), np.ones(m)
    epsi = 1.0
    x = 0.5 * (alfa + beta)
    y = eem.copy()
    z = 1.0
    lam = eem.copy()
    xsi = np.maximum(een / (x - alfa), een)
    eta = np.maximum(een / (beta - x), een)
    mu = np.maximum(eem, 0.5 * c)
    zet = 1.0
    s = eem.copy()

    def residual(x, y, z, lam, xsi, eta, mu, zet, s, epsi):
        ux1, xl1 = upp - x, x - low
        plam = p0 + P.T @ lam
        qlam = q0 + Q.T @ lam
        gvec = P @ (1.0 / ux1) + Q @ (1.0 / xl1)
        dpsidx = plam / ux1**2 - qlam / xl1**2
        return np.concatenate([
            dpsidx - xsi + eta,
            c + d * y - mu - lam,
            [a0 - zet - a @ lam],
            gvec - a * z - y + s - b,
            xsi * (x - alfa) - epsi,
            eta * (beta - x) - epsi,
            mu * y - epsi,
            [zet * z - epsi],
            lam * s - epsi,
        ])

    while epsi > epsimin:
        res = residual(x, y, z, lam, xsi, eta, mu, zet, s, epsi)
        resnorm, resmax = np.linalg.norm(res), np.abs(res).max()
        it = 0
        while resmax > 0.9 * epsi and it < 200:
            it += 1
            ux1, xl1 = upp - x, x - low
            ux2, xl2 = ux1**2, xl1**2
            plam = p0 + P.T @ lam
            qlam = q0 + Q.T @ lam
            gvec = P @ (1.0 / ux1) + Q @ (1.0 / xl1)
            GG = P / ux2[None, :] - Q / xl2[None, :]
            dpsidx = plam / ux2 - qlam / xl2
            delx = dpsidx - epsi / (x - alfa) + epsi / (beta - x)
            dely = c + d * y - lam - epsi / y
            delz = a0 - a @ lam - epsi / z
            dellam = gvec - a * z - y - b + epsi / lam
            diagx = 2.0 * (plam / (ux1 * ux2) + qlam / (xl1 * xl2)) + xsi / (x - alfa) + eta / (beta - x)
            diagy = d + mu / y
            diaglamyi = s / lam + 1.0 / diagy
            blam = dellam + dely / diagy - GG @ (delx / diagx)
            Alam = np.diag(diaglamyi) + (GG / diagx[None, :]) @ GG.T
            AA = np.zeros((m + 1, m + 1))
            AA[:m, :m] = Alam
            AA[:m, m] = a
            AA[m, :m] = a
            AA[m, m] = -zet / z
            sol = np.linalg.solve(AA, np.concatenate([blam, [delz]]))
            dlam, dz = sol[:m], sol[m]
            dx = -delx / diagx - (GG.T @ dlam) / diagx
            dy = -dely / diagy + dlam / diagy
            dxsi = -xsi + epsi / (x - alfa) - xsi * dx / (x - alfa)
            deta = -eta + epsi / (beta - x) + eta * dx / (beta - x)
            dmu = -mu + epsi / y - mu * dy / y
            dzet = -zet + epsi / z - zet * dz / z
            ds = -s + epsi / lam - s * dlam / lam

            xx = np.concatenate([y, [z], lam, xsi, eta, mu, [zet], s])
            dxx = np.concatenate([dy, [dz], dlam, dxsi, deta, dmu, [dzet], ds])
            stmxx = np.max(-1.01 * dxx / xx)
            stmalfa = np.max(-1.01 * dx / (x - alfa))
            stmbeta = np.max(1.01 * dx / (beta - x))
            steg = 1.0 / max(stmalfa, stmbeta, stmxx, 1.0)

            old = (x, y, z, lam, xsi, eta, mu, zet, s)
            step = (dx, dy, dz, dlam, dxsi, deta, dmu, dzet, ds)
            for _ in range(50):
                new = tuple(o + steg * dd for o, dd in zip(old, step))
                res = residual(*new, epsi)
                if np.linalg.norm(res) <= resnorm:
                    break
                steg *= 0.5
            x, y, z, lam, xsi, eta, mu, zet, s = new
            resnorm, resmax = np.linalg.norm(res), np.abs(res).max()
        epsi *= 0.1
    return x
