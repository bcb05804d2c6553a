"""Two-stage co-design over a grid of sampling intervals and lags.

For every ``(h, tau)`` the network is scheduled first, which fixes the
end-to-end delivery probability ``rho*``; the controller and estimator are
then designed for that ``rho*`` and the loss bounds are evaluated.

All losses reported here are normalized by time (per second of operation),
so points with different sampling intervals are directly comparable.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import lqg
from .discretize import discretize
from .model import ContinuousPlant, DesignConfig, NetworkTopology
from .netdp import RandomizedPolicy, solve_constrained
from .simulate import simulate_closed_loop

log = logging.getLogger(__name__)

CONVERGED = "converged"
DIVERGED = "diverged"
SWEEP_COLUMNS = ("h_ms", "tau_ms", "D", "C_req", "rho_star", "theta1", "C1", "C2",
                 "J_min", "J_max", "J_mc_mean", "J_mc_stderr", "status")
FRONTIER_COLUMNS = ("epsilon_per_ms", "J_opt", "h_opt_ms", "rho_opt")


class AllDiverged(ValueError):
    """No converged design point to choose from."""


@dataclass(frozen=True, eq=False)
class DesignPoint:
    h_ms: float
    tau_ms: float
    d_slots: int
    c_req: float
    rho_star: float
    policy: RandomizedPolicy
    j_min: float
    j_max: float
    status: str
    j_mc_mean: float = math.nan
    j_mc_stderr: float = math.nan

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def row(self) -> tuple:
        pol = self.policy
        return (self.h_ms, self.tau_ms, self.d_slots, self.c_req, self.rho_star, pol.theta1,
                pol.c1, pol.c2, self.j_min, self.j_max, self.j_mc_mean, self.j_mc_stderr,
                self.status)


def deadline_slots(tau_ms: float, slot_ms: float) -> int:
    """Largest ``D`` with ``D * t_s <= tau``."""
    return int(math.floor(tau_ms / slot_ms + 1e-9))


def _loss_bounds(dp, gains, rho):
    """Time-normalized ``(j_min, j_max, converged)``."""
    if dp.n_steps is None:
        cost, cov = lqg.stationary_bounds(dp, rho, gains)
        return cost.j_min / dp.h_s, cost.j_max / dp.h_s, cov.converged
    cov = lqg.covariance_bounds(dp, rho)
    if not cov.converged:
        return math.inf, math.inf, False
    j_low, j_up = lqg.finite_horizon_bounds(dp, gains, rho)
    span = dp.n_steps * dp.h_s
    return j_low / span, j_up / span, cov.converged


def evaluate_point(plant: ContinuousPlant, topology: NetworkTopology, h_ms: float,
                   tau_ms: float, config: DesignConfig, simulate: bool = False,
                   mode: str = "bernoulli") -> DesignPoint:
    """Schedule the network, design the loop and bound its loss at one grid point."""
    source = config.source_node or topology.source
    d = deadline_slots(tau_ms, topology.slot_ms)
    c_req = math.inf if config.epsilon is None else config.epsilon * h_ms
    policy = solve_constrained(topology, source, d, c_req)
    rho = policy.reliability
    dp = discretize(plant, h_ms / 1000.0, tau_ms / 1000.0, config.horizon_s)
    try:
        gains = lqg.riccati_control(dp, finite_horizon=dp.n_steps is not None)
    except lqg.RiccatiDivergence:
        return DesignPoint(h_ms, tau_ms, d, c_req, rho, policy, math.inf, math.inf, DIVERGED)
    j_min, j_max, ok = _loss_bounds(dp, gains, rho)
    status = CONVERGED if ok and math.isfinite(j_max) else DIVERGED
    mc_mean = mc_err = math.nan
    if simulate and status == CONVERGED:
        report = simulate_closed_loop(plant, dp, gains, policy, topology,
                                      replicates=config.mc_replicates, seed=config.rng_seed,
                                      mode=mode, trajectory=False, source=source)
        mc_mean = report.j_empirical_mean / dp.h_s
        mc_err = report.j_empirical_stderr / dp.h_s
    log.debug("h=%g tau=%g D=%d rho=%.6g J=[%.6g, %.6g] %s", h_ms, tau_ms, d, rho, j_min,
              j_max, status)
    return DesignPoint(h_ms, tau_ms, d, c_req, rho, policy, j_min, j_max, status, mc_mean,
                       mc_err)


def _eval_task(args):
    return evaluate_point(*args)


def default_workers() -> int:
    return os.cpu_count() or 1


def sweep(plant: ContinuousPlant, topology: NetworkTopology, config: DesignConfig,
          simulate: bool = False, mode: str = "bernoulli",
          threads: Optional[int] = 1) -> list:
    """Evaluate every grid point; results are ordered by ``(h, tau)``.

    Points are independent, so ``threads > 1`` farms them out to worker
    processes without changing the results.
    """
    config.validate(topology.slot_ms)
    tasks = [(plant, topology, h, tau, config, simulate, mode) for h, tau in config.grid()]
    workers = default_workers() if threads is None else int(threads)
    if workers <= 1 or len(tasks) <= 1:
        return [_eval_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(_eval_task, tasks))


def _criterion_value(point: DesignPoint, criterion: str) -> float:
    if criterion == "j_max":
        return point.j_max
    if criterion == "j_mc":
        return point.j_mc_mean
    raise ValueError("criterion must be 'j_max' or 'j_mc'")


def select_optimum(points: Sequence[DesignPoint], criterion: str = "j_max") -> DesignPoint:
    """Converged point with the smallest criterion; ties go to smaller ``h``, then ``tau``."""
    best = None
    best_key = None
    for pt in points:
        val = _criterion_value(pt, criterion)
        if not pt.converged or not np.isfinite(val):
            continue
        key = (val, pt.h_ms, pt.tau_ms)
        if best_key is None or key < best_key:
            best, best_key = pt, key
    if best is None:
        raise AllDiverged("no converged design point")
    return best


@dataclass(frozen=True)
class FrontierRow:
    epsilon: float
    j_opt: float
    h_opt_ms: float
    rho_opt: float


def energy_frontier(plant: ContinuousPlant, topology: NetworkTopology, config: DesignConfig,
                    epsilon_grid: Sequence[float], criterion: str = "j_max",
                    threads: Optional[int] = 1, simulate: bool = False):
    """Optimal loss per energy budget.

    ``math.inf`` in ``epsilon_grid`` stands for an unconstrained network.
    Returns the frontier rows and the underlying sweeps keyed by ``epsilon``.
    """
    rows = []
    sweeps = {}
    for eps in epsilon_grid:
        eps = float(eps)
        if not eps >= 0:
            raise ValueError("epsilon must be nonnegative")
        cfg = DesignConfig(config.horizon_s, None if math.isinf(eps) else eps, config.h_grid,
                           config.tau_grid, config.source_node, config.mc_replicates,
                           config.rng_seed)
        points = sweep(plant, topology, cfg, simulate=simulate, threads=threads)
        sweeps[eps] = points
        try:
            best = select_optimum(points, criterion)
            rows.append(FrontierRow(eps, _criterion_value(best, criterion), best.h_ms,
                                    best.rho_star))
        except AllDiverged:
            rows.append(FrontierRow(eps, math.inf, math.nan, math.nan))
    return rows, sweeps


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def write_sweep_csv(points: Sequence[DesignPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for pt in points:
            writer.writerow([_fmt(v) for v in pt.row()])


def write_frontier_csv(rows: Sequence[FrontierRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FRONTIER_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(r.epsilon), _fmt(r.j_opt), _fmt(r.h_opt_ms), _fmt(r.rho_opt)])
