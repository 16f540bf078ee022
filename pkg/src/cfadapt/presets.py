"""Benchmark set-ups: clamped cantilever and symmetric half U-beam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .fem import DirichletBC, Discretization, StateProblem, Traction, on_segment
from .mechanics import MaterialParams
from .mesh import Forest, create_base_mesh, refine_uniform
from .optimization import OptProblem

__all__ = ["Benchmark", "preset_cantilever", "preset_ubeam", "build_preset", "reentrant_corners"]


@dataclass
class Benchmark:
    """Boundary-value problem definition that can be re-instantiated on any forest."""

    forest: Forest
    problem: OptProblem
    material: MaterialParams
    dirichlet: list
    tractions: list
    simp_q: float = 3.0
    rho_min: float = 1e-6
    initial_density: float = 0.5
    polygon: np.ndarray = field(default=None, repr=False)

    def state(self, disc: Discretization, rho_hat) -> StateProblem:
        return StateProblem(disc, rho_hat, self.material, self.dirichlet, self.tractions,
                            q=self.simp_q, rho_min=self.rho_min)

    @property
    def initial_state(self) -> StateProblem:
        return self.state(Discretization(self.forest), np.full(self.forest.n_active, self.initial_density))

    def __iter__(self):
        yield self.forest
        yield self.initial_state
        yield self.problem


def _common(cfg: RunConfig, forest, dirichlet, tractions, polygon, kind, stress_limit=None):
    forest = refine_uniform(forest, cfg.mesh.init_level)
    o = cfg.optimizer
    problem = OptProblem(kind, volume_bound=o.volume_fraction * forest.area,
                         stress_limit=stress_limit, p=o.p, epsilon=o.epsilon, move=o.move)
    rho0 = o.volume_fraction if o.initial_density is None else o.initial_density
    return Benchmark(forest, problem, MaterialParams(cfg.material.lam, cfg.material.mu),
                     dirichlet, tractions, o.simp_q, o.rho_min, rho0, polygon)


def preset_cantilever(cfg: RunConfig) -> Benchmark:
    """Left edge clamped; downward line load on a short patch of the right edge."""
    g = cfg.geometry
    W, H = g.width, g.height
    base = create_base_mesh(g.nx, g.ny, W, H, max_level=cfg.mesh.max_level)
    dirichlet = [DirichletBC(on_segment((0.0, 0.0), (0.0, H)), (0, 1), 0.0)]
    y0, y1 = g.load_center - 0.5 * g.load_width, g.load_center + 0.5 * g.load_width
    tractions = [Traction((W, y0), (W, y1), (0.0, -cfg.load.force))]
    polygon = np.array([[0, 0], [W, 0], [W, H], [0, H]], float)
    kind = "compliance_volume" if cfg.optimizer.stress_limit is None else "compliance_volume_stress"
    return _common(cfg, base, dirichlet, tractions, polygon, kind, cfg.optimizer.stress_limit)


def preset_ubeam(cfg: RunConfig) -> Benchmark:
    """Half U-beam: envelope minus a rectangular cutout touching the symmetry line.

    The symmetry line is ``x = 0`` (roller, ``u_x = 0``). The base rests on a
    roller support ``u_y = 0`` over ``0 <= x <= support_width`` and the top face
    of the leg carries a downward line load on a patch of width ``load_width``
    centred at ``x = load_center``.
    """
    g = cfg.geometry
    W, H = g.width, g.height
    x0, y0, x1, y1 = g.cutout
    if not (x0 == 0.0 and 0 < y0 < H and 0 < x1 < W and y1 == H):
        raise ValueError("U-beam cutout must span from the symmetry line to the top edge")
    cx = (np.arange(g.nx) + 0.5) * W / g.nx
    cy = (np.arange(g.ny) + 0.5) * H / g.ny
    inside = (cx[None, :] > x0) & (cx[None, :] < x1) & (cy[:, None] > y0) & (cy[:, None] < y1)
    base = create_base_mesh(g.nx, g.ny, W, H, max_level=cfg.mesh.max_level, mask=~inside)
    dirichlet = [
        DirichletBC(on_segment((0.0, 0.0), (0.0, y0)), (0,), 0.0),
        DirichletBC(on_segment((0.0, 0.0), (g.support_width, 0.0)), (1,), 0.0),
    ]
    lx0, lx1 = g.load_center - 0.5 * g.load_width, g.load_center + 0.5 * g.load_width
    if not x1 <= lx0 < lx1 <= W:
        raise ValueError("U-beam load patch must lie on the leg top")
    tractions = [Traction((lx0, H), (lx1, H), (cfg.load.force, 0.0))]
    polygon = np.array([[0, 0], [W, 0], [W, H], [x1, H], [x1, y0], [0, y0]], float)
    return _common(cfg, base, dirichlet, tractions, polygon, "compliance_volume_stress",
                   cfg.optimizer.stress_limit)


def build_preset(cfg: RunConfig) -> Benchmark:
    if cfg.run.preset == "cantilever":
        return preset_cantilever(cfg)
    return preset_ubeam(cfg)


def reentrant_corners(polygon):
    """Vertices of a counter-clockwise polygon with an interior angle above 180 degrees."""
    P = np.asarray(polygon, float)
    prev, nxt = np.roll(P, 1, axis=0), np.roll(P, -1, axis=0)
    a, b = P - prev, nxt - P
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return P[cross < 0]
