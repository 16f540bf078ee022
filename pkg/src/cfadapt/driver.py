"""Outer optimisation loop with periodic mesh adaptation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .adaptivity import (
    CriterionConfig,
    cell_von_mises,
    compute_flags,
    configurational_forces,
    transfer_cell_field,
    transfer_fields,
)
from .config import RunConfig, config_text
from .fem import Discretization, SolverError, solve_newton
from .mesh import NodeLayout, execute_adaptation
from .optimization import MMA, compliance, pnorm_stress, sensitivities, volume_constraint
from .presets import Benchmark, build_preset
from .regularization import DensityChain, HelmholtzFilter
from .vtk import write_vtu

log = logging.getLogger(__name__)

__all__ = ["IterationRecord", "RunResult", "Evaluation", "Optimizer", "run", "CSV_HEADER", "beta_schedule"]

CSV_HEADER = ["iter", "objective", "g_vol", "g_pvm", "cells", "dofs", "dt", "t_acc", "event"]


@dataclass
class IterationRecord:
    iter: int
    objective: float
    g_vol: float
    g_pvm: float
    cells: int
    dofs: int
    dt: float
    t_acc: float
    event: int
    criterion_max: float = math.nan
    beta: float = 1.0
    newton_iterations: int = 0
    fallback: bool = False

    def csv_row(self):
        return [self.iter, repr(self.objective), repr(self.g_vol), repr(self.g_pvm), self.cells,
                self.dofs, f"{self.dt:.6f}", f"{self.t_acc:.6f}", self.event]


@dataclass
class Evaluation:
    """Converged state and responses on one mesh."""

    forest: object
    disc: Discretization
    chain: DensityChain
    fields: object
    state: object
    solution: object
    compliance: float
    g_vol: float
    g_pvm: float


@dataclass
class RunResult:
    status: int
    records: list = field(default_factory=list)
    forest: object = None
    rho: np.ndarray | None = None
    last: Evaluation | None = None
    output_dir: Path | None = None
    message: str = ""


def beta_schedule(it, beta0=1.0, interval=50, beta_max=16.0):
    """Heaviside sharpness at 1-based iteration ``it``: doubled every ``interval``."""
    return min(beta0 * 2.0 ** ((it - 1) // interval), beta_max)


class Optimizer:
    """Stateful loop; ``step()`` performs one iteration and returns its record."""

    def __init__(self, cfg: RunConfig, bench: Benchmark | None = None):
        self.cfg = cfg
        self.bench = bench or build_preset(cfg)
        self.problem = self.bench.problem
        self.criterion = CriterionConfig(cfg.adapt.criterion, cfg.adapt.c_r, cfg.adapt.c_c,
                                         cfg.adapt.interval, tuple(cfg.adapt.dens_bounds),
                                         cfg.adapt.exclude_boundary)
        self.forest = self.bench.forest
        self.rho = np.full(self.forest.n_active, float(self.bench.initial_density))
        self.u = None
        self.mma = MMA(move=cfg.optimizer.move)
        self.iteration = 0
        self.t_acc = 0.0
        self.c_ref = None
        self.records: list[IterationRecord] = []
        self.last: Evaluation | None = None
        self._mesh_cache = None

    # -- per-mesh objects ----------------------------------------------
    def _mesh_objects(self, forest):
        if self._mesh_cache is None or self._mesh_cache[0] is not forest:
            disc = Discretization(forest)
            filt = HelmholtzFilter(forest, self.cfg.filter.radius, self.cfg.filter.boundary_coeff)
            self._mesh_cache = (forest, disc, filt)
        return self._mesh_cache[1:]

    def evaluate(self, forest, rho, beta, u0=None) -> Evaluation:
        disc, filt = self._mesh_objects(forest)
        chain = DensityChain(filt, beta, self.cfg.filter.eta)
        fields = chain.forward(rho)
        state = self.bench.state(disc, fields.rho_hat)
        s = self.cfg.solver
        kw = dict(load_steps=self.cfg.load.load_steps, rtol=s.rtol, atol=s.atol,
                  max_iter=s.max_iter, max_bisections=s.max_bisections)
        try:
            sol = solve_newton(state, u0=u0, **kw)
        except SolverError:
            if u0 is None:
                raise
            log.info("warm start failed; restarting Newton from zero")
            sol = solve_newton(state, **kw)
        C = compliance(state, sol)
        gv = volume_constraint(rho, forest, self.problem.volume_bound)
        gp = math.nan
        if self.problem.has_stress:
            gp = pnorm_stress(state, sol, self.problem.stress_limit, self.problem.p, self.problem.epsilon)
        return Evaluation(forest, disc, chain, fields, state, sol, C, gv, gp)

    def _adapt(self, ev: Evaluation, beta):
        flags, cmax = compute_flags(self.criterion, ev.state, ev.solution, ev.fields.rho_tilde,
                                    self.problem.epsilon)
        new = execute_adaptation(ev.forest, flags)
        if new == ev.forest:
            return ev, 0, cmax
        old = ev.forest
        new_disc, _ = self._mesh_objects(new)
        rho, u = transfer_fields(old, new, self.rho, ev.solution.u, ev.disc, new_disc)
        self.mma.remap(lambda a: transfer_cell_field(old, new, a))
        self.forest, self.rho = new, rho
        log.info("adapted mesh: %d -> %d cells", old.n_active, new.n_active)
        return self.evaluate(new, rho, beta, u), 1, cmax

    def step(self) -> IterationRecord:
        t0 = time.perf_counter()
        self.iteration += 1
        it = self.iteration
        f = self.cfg.filter
        beta = beta_schedule(it, f.beta0, f.beta_interval, f.beta_max)
        ev = self.evaluate(self.forest, self.rho, beta, self.u)
        event, cmax = 0, math.nan
        if it % self.criterion.interval == 0 and it < self.cfg.run.iterations:
            ev, event, cmax = self._adapt(ev, beta)
        self.last = ev
        self.u = ev.solution.u

        if self.c_ref is None:
            self.c_ref = abs(ev.compliance) if ev.compliance != 0 else 1.0
        sens = sensitivities(ev.state, ev.solution, self.problem, ev.chain, ev.fields, ev.forest)
        Vb = self.problem.volume_bound
        g = [ev.g_vol / Vb]
        dg = [sens.volume / Vb]
        if self.problem.has_stress:
            g.append(ev.g_pvm - 1.0)
            dg.append(sens.pnorm)
        self.rho = self.mma.update(self.rho, ev.compliance / self.c_ref, sens.compliance / self.c_ref,
                                   np.array(g), np.vstack(dg))
        dt = time.perf_counter() - t0
        self.t_acc += dt
        rec = IterationRecord(it, ev.compliance, ev.g_vol, ev.g_pvm, ev.forest.n_active,
                              ev.disc.n_dofs, dt, self.t_acc, event, cmax, beta,
                              ev.solution.iterations, self.mma.last_fallback)
        self.records.append(rec)
        return rec

    def final_evaluation(self):
        """Responses of the final design on the final mesh."""
        f = self.cfg.filter
        beta = beta_schedule(self.iteration, f.beta0, f.beta_interval, f.beta_max)
        return self.evaluate(self.forest, self.rho, beta, self.u)


# ---------------------------------------------------------------------------
# artifacts


def snapshot(path, ev: Evaluation, epsilon=0.1):
    """VTK snapshot of densities, stresses, displacement and configurational forces."""
    forest, disc = ev.forest, ev.disc
    q1 = NodeLayout(forest, degree=1)
    q2_ids = disc.layout.lookup(q1.node_keys)
    u = ev.solution.u.reshape(-1, 2)[q2_ids]
    cnf = configurational_forces(ev.state, ev.solution, epsilon).forces[q2_ids]
    cell = {
        "rho": ev.fields.rho,
        "rho_tilde": ev.fields.rho_tilde,
        "rho_hat": ev.fields.rho_hat,
        "von_mises": cell_von_mises(ev.state, ev.solution.u, epsilon),
        "level": forest.levels.astype(float),
    }
    return write_vtu(path, forest, cell, {"displacement": u, "cnf": cnf})


def _summary(opt: Optimizer, status, message, final: Evaluation | None):
    recs = opt.records
    out = {
        "status": status,
        "message": message,
        "preset": opt.cfg.run.preset,
        "criterion": opt.criterion.kind,
        "iterations": len(recs),
        "adaptation_events": int(sum(r.event for r in recs)),
        "peak_cells": max((r.cells for r in recs), default=0),
        "t_acc": recs[-1].t_acc if recs else 0.0,
        "volume_bound": opt.problem.volume_bound,
    }
    if final is not None:
        out.update(final_objective=final.compliance, final_g_vol=final.g_vol,
                   final_g_pvm=None if math.isnan(final.g_pvm) else final.g_pvm,
                   final_cells=final.forest.n_active, final_dofs=final.disc.n_dofs)
    out["history"] = [{k: (None if isinstance(v, float) and math.isnan(v) else v)
                       for k, v in asdict(r).items()} for r in recs]
    return out


def run(cfg: RunConfig, callback: Callable | None = None, write_artifacts=True) -> RunResult:
    """Run the configured optimisation. Exit status 0 on success, 1 on solver failure.

    ``callback(optimizer, record)`` is invoked after every iteration.
    """
    out = cfg.output_dir if write_artifacts else None
    handler = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(config_text(cfg))
        handler = logging.FileHandler(out / "run.log", mode="w")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger("cfadapt").addHandler(handler)
        logging.getLogger("cfadapt").setLevel(logging.INFO)
    try:
        log.info("resolved config:\n%s", config_text(cfg))
        log.info("defaulted keys: %s", ", ".join(cfg.defaulted))
        opt = Optimizer(cfg)
        csv_file = open(out / "history.csv", "w", newline="") if out else None
        writer = csv.writer(csv_file) if csv_file else None
        if writer:
            writer.writerow(CSV_HEADER)
        status, message, final = 0, "completed", None
        try:
            for _ in range(cfg.run.iterations):
                rec = opt.step()
                log.info("iter %d obj %.6e g_vol %.3e g_pvm %.4f cells %d dofs %d dt %.2fs%s",
                         rec.iter, rec.objective, rec.g_vol, rec.g_pvm, rec.cells, rec.dofs, rec.dt,
                         " [adapted]" if rec.event else "")
                if rec.fallback:
                    log.warning("iter %d: MMA fallback step used", rec.iter)
                if writer:
                    writer.writerow(rec.csv_row())
                    csv_file.flush()
                if out and rec.iter % cfg.run.snapshot_every == 0:
                    snapshot(out / f"snapshot_{rec.iter:04d}.vtu", opt.last, cfg.optimizer.epsilon)
                if callback:
                    callback(opt, rec)
            final = opt.final_evaluation()
            if out:
                snapshot(out / "final.vtu", final, cfg.optimizer.epsilon)
        except SolverError as exc:
            status, message = 1, f"solver failure at iteration {opt.iteration}: {exc}"
            log.error(message)
            if out and opt.last is not None:
                snapshot(out / "last_good.vtu", opt.last, cfg.optimizer.epsilon)
        finally:
            if csv_file:
                csv_file.close()
        if out:
            (out / "summary.json").write_text(json.dumps(_summary(opt, status, message, final), indent=2))
        return RunResult(status, opt.records, opt.forest, opt.rho, final or opt.last, out, message)
    finally:
        if handler is not None:
            logging.getLogger("cfadapt").removeHandler(handler)
            handler.close()
