"""Acceptance suite: one test per criterion, each reporting a single pass/fail line."""

import math
import subprocess
import sys
import time
import timeit
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from _instances import random_continuous_plant, random_discrete_plant, random_network, scalar_plant
from conftest import ACCEPTANCE_LINES
from nccodesign import lqg
from nccodesign.codesign import energy_frontier, sweep
from nccodesign.discretize import discretize
from nccodesign.model import DesignConfig, default_h_grid, load_plant, load_topology, make_topology
from nccodesign.netdp import (brute_force_policies, concave_envelope, distributed_dp,
                              solve_constrained, solve_weighted_sum)
from nccodesign.simulate import coupling_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
UNSTABLE = load_plant(CONFIGS / "plant_unstable.json")
RESONANT = load_plant(CONFIGS / "plant_resonant.json")
SHIPPED = load_topology(CONFIGS / "topology_6hop.json")
H_GRID = default_h_grid(10.0, 50)
DELTAS = np.round(np.arange(0.0, 1.0 + 1e-9, 0.05), 10)


def record(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES[number] = line
    assert ok, line


def small_instances(seed, count):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        yield rng, random_network(rng, max_nodes=4), int(rng.integers(0, 5))


def j_max_curve(plant, topology, h_grid=H_GRID, epsilon=None):
    points = sweep(plant, topology, DesignConfig(h_grid=h_grid, epsilon=epsilon))
    return [p.j_max if p.converged else math.inf for p in points]


def strict_local_minima(values):
    return [i for i in range(1, len(values) - 1)
            if math.isfinite(values[i - 1]) and values[i] < values[i - 1]
            and values[i] < values[i + 1]]


def test_criterion_01_dp_matches_brute_force():
    start = time.perf_counter()
    worst = 0.0
    count = 0
    for _, topo, d in small_instances(101, 220):
        front = brute_force_policies(topo, 1, d)
        for delta in DELTAS:
            table, _ = solve_weighted_sum(topo, 1, d, float(delta))
            best = max(r - delta * c for r, c in front)
            worst = max(worst, abs(table.at(1, 0)[0] - best))
        count += 1
    elapsed = time.perf_counter() - start
    record(1, worst <= 1e-12 and elapsed < 60.0,
           f"{count} instances x {len(DELTAS)} multipliers, max |error| {worst:.2e}, "
           f"{elapsed:.1f} s")


def test_criterion_02_constrained_optimum():
    worst_rho = worst_cost = 0.0
    count = 0
    for rng, topo, d in small_instances(202, 220):
        front = brute_force_policies(topo, 1, d)
        c_free = solve_weighted_sum(topo, 1, d, 0.0)[1].energy
        c_req = float(rng.uniform(0.0, 1.2 * c_free + 0.1))
        pol = solve_constrained(topo, 1, d, c_req)
        worst_rho = max(worst_rho, abs(pol.reliability - concave_envelope(front, c_req)))
        spent = pol.theta1 * pol.c1 + pol.theta2 * pol.c2
        worst_cost = max(worst_cost, abs(spent - min(c_req, c_free)))
        count += 1
    record(2, worst_rho <= 1e-9 and worst_cost <= 1e-9,
           f"{count} instances, reliability error {worst_rho:.2e}, cost error {worst_cost:.2e}")


def test_criterion_03_distributed_equals_centralized():
    rng = np.random.default_rng(303)
    mismatches = 0
    for _ in range(50):
        topo = random_network(rng, max_nodes=8)
        d = int(rng.integers(0, 12))
        delta = float(rng.uniform(0.0, 0.8))
        central, _ = solve_weighted_sum(topo, 1, d, delta)
        dist = distributed_dp(topo, d, delta)
        same = all(np.array_equal(getattr(central, name), getattr(dist, name))
                   for name in ("u_star", "rho_star", "c_star"))
        mismatches += not same
    record(3, mismatches == 0, f"50 instances, {mismatches} mismatches")


def complete_graph(n, rng):
    links = [(i, j, float(rng.uniform(0.05, 0.9)))
             for i in range(1, n) for j in range(1, n + 1) if i != j]
    return make_topology(n, links)


def test_criterion_04_complexity_scaling():
    rng = np.random.default_rng(404)
    cells = []
    for n in (10, 20, 40, 80):
        topo = complete_graph(n, rng)
        for d in (10, 20, 40, 80, 160):
            timer = timeit.Timer(lambda topo=topo, d=d: solve_weighted_sum(topo, 1, d, 0.01))
            cells.append((n, d, timer, timer.autorange()[0]))
    # interleaved rounds keep a transient slowdown from biasing a single cell
    best = [math.inf] * len(cells)
    for _ in range(7):
        for k, (_, _, timer, number) in enumerate(cells):
            best[k] = min(best[k], timer.timeit(number) / number)
    data = np.array([(math.log(d), math.log(n), math.log(t))
                     for (n, d, _, _), t in zip(cells, best)])
    design = np.column_stack([np.ones(len(data)), data[:, 0], data[:, 1]])
    coef, *_ = np.linalg.lstsq(design, data[:, 2], rcond=None)
    exp_d, exp_n = float(coef[1]), float(coef[2])
    ok = 0.8 <= exp_d <= 1.2 and 1.6 <= exp_n <= 2.4
    record(4, ok, f"fitted exponents D^{exp_d:.2f} N^{exp_n:.2f}")


def completion_of_squares(dp):
    r_inv = np.linalg.inv(dp.xi_uu)
    a = dp.phi - dp.gamma @ r_inv @ dp.xi_xu.T
    q = dp.xi_xx - dp.xi_xu @ r_inv @ dp.xi_xu.T
    return solve_discrete_are(a, dp.gamma, q, dp.xi_uu)


def test_criterion_05_riccati_oracles():
    golden = (1 + math.sqrt(5)) / 2
    err_golden = abs(lqg.riccati_control(scalar_plant(1.0, 1.0, 1.0)).s_inf[0, 0] - golden)
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(100):
        dp = random_discrete_plant(rng)
        ref = completion_of_squares(dp)
        s = lqg.riccati_control(dp).s_inf
        worst = max(worst, float(np.abs(s - ref).max() / np.abs(ref).max()))
    record(5, err_golden <= 1e-10 and worst <= 1e-9,
           f"golden ratio error {err_golden:.2e}, 100 systems max relative error {worst:.2e}")


@pytest.mark.slow
def test_criterion_06_bound_sandwich():
    start = time.perf_counter()
    cfg = DesignConfig(horizon_s=500.0, h_grid=H_GRID, mc_replicates=10000, rng_seed=0)
    points = sweep(UNSTABLE, SHIPPED, cfg, simulate=True)
    converged = [p for p in points if p.converged]
    outside = no_rounding = strict = 0
    for p in converged:
        band = 3.0 * p.j_mc_stderr
        # with rho* = 1 to double precision every replicate sees the same sequence,
        # the stderr collapses to rounding noise and only summation order differs
        rounding = 1e-12 * p.j_max
        outside += not (p.j_min - band - rounding <= p.j_mc_mean <= p.j_max + band + rounding)
        no_rounding += not (p.j_min - band <= p.j_mc_mean <= p.j_max + band)
        strict += not (p.j_min <= p.j_mc_mean <= p.j_max)
    elapsed = time.perf_counter() - start
    ok = bool(converged) and outside <= 0.01 * len(points) and elapsed < 1800.0
    record(6, ok, f"{len(converged)}/{len(points)} convergent h, {outside} outside the 3-stderr "
                  f"band, {no_rounding} without the 1e-12 rounding allowance, {strict} without "
                  f"any tolerance, {elapsed:.0f} s")


def test_criterion_07_pathwise_coupling():
    dp = discretize(UNSTABLE, 0.1, 0.1, 500.0)
    rep = coupling_experiment(UNSTABLE, dp, None, 0.5, 0.9, replicates=1000, seed=7)
    ok = (rep.cost_violations == 0 and rep.loewner_violations == 0
          and rep.worst_loewner_eig >= -1e-9)
    record(7, ok, f"1000 replicates x {rep.n_steps} steps, {rep.cost_violations} cost "
                  f"violations, {rep.loewner_violations} Loewner violations, smallest "
                  f"eigenvalue {rep.worst_loewner_eig:.2e}")


def stabilizable_systems(rng, count):
    found = []
    while len(found) < count:
        h = float(rng.uniform(0.05, 0.3))
        dp = discretize(random_continuous_plant(rng), h, h * float(rng.uniform(0.3, 1.0)))
        try:
            found.append((dp, lqg.riccati_control(dp)))
        except lqg.RiccatiDivergence:
            continue
    return found


def test_criterion_08_upper_bound_monotone_in_reliability():
    grid = np.round(np.arange(0.05, 1.0 + 1e-9, 0.05), 10)
    bad = 0
    for dp, gains in stabilizable_systems(np.random.default_rng(808), 20):
        vals = [lqg.stationary_bounds(dp, float(r), gains)[0].j_max for r in grid]
        finite = [math.isfinite(v) for v in vals]
        prefix = finite == sorted(finite)
        fin = [v for v in vals if math.isfinite(v)]
        monotone = all(b <= a for a, b in zip(fin, fin[1:]))
        bad += not (prefix and monotone and finite[-1])
    record(8, bad == 0, f"20 systems x {len(grid)} reliabilities, {bad} violations")


def test_criterion_09_optimal_interval_grows_with_loss():
    argmins = []
    interior = True
    for p in (0.2, 0.4, 0.6):
        vals = j_max_curve(UNSTABLE, SHIPPED.with_uniform_loss(p))
        finite = [i for i, v in enumerate(vals) if math.isfinite(v)]
        i_best = min(finite, key=lambda i: vals[i])
        interior &= (vals[i_best] < vals[finite[0]] and vals[i_best] < vals[finite[-1]])
        argmins.append(H_GRID[i_best])
    ok = interior and argmins == sorted(argmins)
    record(9, ok, "argmin h at loss 0.2/0.4/0.6: " + ", ".join(f"{h:.0f} ms" for h in argmins))


def test_criterion_10_multiple_local_minima():
    vals = j_max_curve(RESONANT, SHIPPED)
    minima = [H_GRID[i] for i in strict_local_minima(vals)]
    record(10, len(minima) >= 2, "strict local minima at " +
           ", ".join(f"{h:.0f} ms" for h in minima))


def test_criterion_11_energy_frontier():
    eps_grid = [0.02, 0.03, 0.05, 0.1, 0.2]
    rows, sweeps = energy_frontier(UNSTABLE, SHIPPED, DesignConfig(h_grid=H_GRID), eps_grid)
    js = [r.j_opt for r in rows]
    monotone = all(b <= a for a, b in zip(js, js[1:]))
    spread = 0.0
    for idx in (-1, -2):
        tail = [sweeps[e][idx].j_max for e in eps_grid]
        spread = max(spread, max(tail) - min(tail))
    record(11, monotone and spread <= 1e-9,
           "frontier J " + ", ".join(f"{j:.4g}" for j in js)
           + f", spread at the two largest h {spread:.1e}")


def test_criterion_12_separation():
    rng = np.random.default_rng(1212)
    worst = math.inf
    violations = 0
    for k in range(50):
        topo = random_network(rng, max_nodes=4)
        d = int(rng.integers(1, 5))
        tau_ms = d * topo.slot_ms
        h_ms = tau_ms + 10.0 * int(rng.integers(0, 6))
        plant = UNSTABLE if k % 2 == 0 else random_continuous_plant(rng)
        dp = discretize(plant, h_ms / 1000.0, tau_ms / 1000.0)
        try:
            gains = lqg.riccati_control(dp)
        except lqg.RiccatiDivergence:
            continue
        front = brute_force_policies(topo, 1, d)
        c_req = float(rng.uniform(0.0, 1.2 * front[-1][1] + 0.1))
        best = lqg.stationary_bounds(dp, solve_constrained(topo, 1, d, c_req).reliability,
                                     gains)[0].j_max
        rhos = {r for r, c in front if c <= c_req}
        for (r1, c1), (r2, c2) in zip(front, front[1:]):
            for theta in np.linspace(0.0, 1.0, 11):
                if (1 - theta) * c1 + theta * c2 <= c_req:
                    rhos.add((1 - theta) * r1 + theta * r2)
        for rho in rhos:
            alt = lqg.stationary_bounds(dp, min(1.0, float(rho)), gains)[0].j_max
            if math.isinf(best):
                ok = math.isinf(alt)
                gap = math.inf
            else:
                gap = alt - best
                ok = gap >= -1e-9
            worst = min(worst, gap)
            violations += not ok
    record(12, violations == 0,
           f"50 design points, {violations} violations, smallest J_max gap {worst:.2e}")


def run_sweep(out):
    cmd = [sys.executable, "-m", "nccodesign.cli", "sweep", str(CONFIGS / "plant_unstable.json"),
           str(CONFIGS / "topology_6hop.json"), str(CONFIGS / "design_infinite.json"),
           "--simulate", "--replicates", "40", "--threads", "1", "--seed", "7", "--out", str(out)]
    subprocess.run(cmd, check=True, capture_output=True)
    return out.read_bytes()


def test_criterion_13_determinism(tmp_path):
    first = run_sweep(tmp_path / "a.csv")
    second = run_sweep(tmp_path / "b.csv")
    rows = first.count(b"\n") - 1
    record(13, first == second and rows == len(H_GRID),
           f"two independent runs, {rows} rows, byte-identical: {first == second}")
