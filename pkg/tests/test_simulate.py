import csv
import json
import math

import numpy as np
import pytest

from nccodesign.discretize import discretize
from nccodesign.lqg import finite_horizon_cost, riccati_control
from nccodesign.model import make_topology, second_order_plant
from nccodesign.netdp import solve_constrained, unconstrained_policy
from nccodesign.simulate import (coupling_experiment, simulate_closed_loop, sqrt_psd, stream,
                                 write_report_csv, write_report_json)

PLANT = second_order_plant(-1, 1, 1)


@pytest.fixture(scope="module")
def point():
    dp = discretize(PLANT, 0.1, 0.1, 30.0)
    return dp, riccati_control(dp, finite_horizon=True)


@pytest.fixture
def single_link():
    return make_topology(2, [(1, 2, 0.2)])


def test_streams_are_keyed():
    a = stream(1, "process-noise", 0).random(4)
    assert np.array_equal(a, stream(1, "process-noise", 0).random(4))
    assert not np.array_equal(a, stream(1, "process-noise", 1).random(4))
    assert not np.array_equal(a, stream(1, "link-draws", 0).random(4))
    assert not np.array_equal(a, stream(2, "process-noise", 0).random(4))


def test_sqrt_psd_clips():
    x = np.array([[1.0, 1.0], [1.0, 1.0 - 1e-17]])
    r = sqrt_psd(x)
    np.testing.assert_allclose(r @ r, x, atol=1e-12)
    assert np.all(np.isfinite(r))


def test_seed_determinism(point):
    dp, gains = point
    a = simulate_closed_loop(PLANT, dp, gains, 0.7, replicates=50, seed=9)
    b = simulate_closed_loop(PLANT, dp, gains, 0.7, replicates=50, seed=9)
    assert a.to_dict() == b.to_dict()
    for key in a.per_replicate:
        assert np.array_equal(a.per_replicate[key], b.per_replicate[key], equal_nan=True)
    c = simulate_closed_loop(PLANT, dp, gains, 0.7, replicates=50, seed=10)
    assert c.j_empirical_mean != a.j_empirical_mean


def test_lossless_matches_exact_finite_horizon(point):
    dp, gains = point
    rep = simulate_closed_loop(PLANT, dp, gains, 1.0, replicates=400, seed=1)
    exact = finite_horizon_cost(dp, gains, np.ones(dp.n_steps)) / dp.n_steps
    assert rep.j_empirical_mean == pytest.approx(exact, rel=1e-12)
    assert rep.rho_empirical == 1.0
    # sample-path average estimates the same expectation
    assert abs(rep.j_realized_mean - exact) <= 3 * rep.j_realized_stderr


def test_realized_and_conditional_costs_agree(point):
    dp, gains = point
    rep = simulate_closed_loop(PLANT, dp, gains, 0.6, replicates=600, seed=2)
    err = math.hypot(rep.j_realized_stderr, rep.j_empirical_stderr)
    assert abs(rep.j_realized_mean - rep.j_empirical_mean) <= 3 * err
    assert rep.j_empirical_stderr >= 0 and 0 <= rep.rho_empirical <= 1


def test_slot_level_single_link(single_link):
    dp = discretize(PLANT, 0.01, 0.01, 5.0)
    pol = unconstrained_policy(single_link, 1, 1)
    rep = simulate_closed_loop(PLANT, dp, None, pol, single_link, replicates=200, seed=4,
                               mode="slot-level", trajectory=False)
    packets = 200 * dp.n_steps
    assert abs(rep.rho_empirical - 0.8) <= 3 * math.sqrt(0.8 * 0.2 / packets)
    assert rep.cost_empirical == 1.0


def test_slot_level_mixture_meets_budget(single_link):
    dp = discretize(PLANT, 0.02, 0.02, 5.0)
    pol = solve_constrained(single_link, 1, 2, 1.1)
    rep = simulate_closed_loop(PLANT, dp, None, pol, single_link, replicates=300, seed=5,
                               mode="slot-level", trajectory=False)
    packets = 300 * dp.n_steps
    assert abs(rep.rho_empirical - 0.88) <= 3 * math.sqrt(0.88 * 0.12 / packets)
    per = rep.per_replicate["cost_empirical"]
    stderr = per.std(ddof=1) / math.sqrt(per.size)
    assert abs(rep.cost_empirical - 1.1) <= 3 * stderr


def test_slot_level_agrees_with_bernoulli():
    topo = make_topology(3, [(1, 2, 0.3), (2, 3, 0.4), (1, 3, 0.7)])
    dp = discretize(PLANT, 0.05, 0.05, 20.0)
    gains = riccati_control(dp, finite_horizon=True)
    pol = solve_constrained(topo, 1, 5, 2.5)
    kw = dict(replicates=400, seed=6, trajectory=False)
    slot = simulate_closed_loop(PLANT, dp, gains, pol, topo, mode="slot-level", **kw)
    bern = simulate_closed_loop(PLANT, dp, gains, pol, topo, mode="bernoulli", **kw)
    err = math.hypot(slot.j_empirical_stderr, bern.j_empirical_stderr)
    assert abs(slot.j_empirical_mean - bern.j_empirical_mean) <= 3 * err
    packets = 400 * dp.n_steps
    tol = 3 * math.sqrt(pol.reliability * (1 - pol.reliability) / packets)
    assert abs(slot.rho_empirical - pol.reliability) <= tol


def test_infinite_horizon_defaults_to_500s():
    dp = discretize(PLANT, 0.25, 0.25)
    rep = simulate_closed_loop(PLANT, dp, None, 0.9, replicates=3, seed=0, trajectory=False)
    assert rep.n_steps == 2000


def test_simulate_errors(point, single_link):
    dp, gains = point
    with pytest.raises(ValueError):
        simulate_closed_loop(PLANT, dp, gains, 0.5, replicates=0)
    with pytest.raises(ValueError):
        simulate_closed_loop(PLANT, dp, gains, 0.5, mode="udp")
    with pytest.raises(ValueError):
        simulate_closed_loop(PLANT, dp, gains, 1.5)
    with pytest.raises(ValueError):
        simulate_closed_loop(PLANT, dp, gains, 0.5, single_link, mode="slot-level")
    pol = unconstrained_policy(single_link, 1, 3)  # lag 100 ms allows 10 slots
    with pytest.raises(ValueError, match="slots"):
        simulate_closed_loop(PLANT, dp, gains, pol, single_link, mode="slot-level")
    other = second_order_plant(-1, 1, 1, rv_c=(0.5, 0.5))
    object.__setattr__(other, "c_matrix", np.eye(2))
    with pytest.raises(ValueError, match="dimensions"):
        simulate_closed_loop(other, dp, gains, 0.5)


def test_coupling_trivial_cases(point):
    dp, gains = point
    same = coupling_experiment(PLANT, dp, gains, 0.6, 0.6, replicates=30, seed=1)
    assert np.array_equal(same.cost_low, same.cost_high)
    assert same.cost_violations == 0 and same.loewner_violations == 0
    top = coupling_experiment(PLANT, dp, gains, 0.3, 1.0, replicates=30, seed=1)
    assert top.high_all_delivered
    with pytest.raises(ValueError):
        coupling_experiment(PLANT, dp, gains, 0.9, 0.5)


def test_coupling_orders_costs(point):
    dp, gains = point
    rep = coupling_experiment(PLANT, dp, gains, 0.5, 0.9, replicates=200, seed=3)
    assert rep.cost_violations == 0 and rep.loewner_violations == 0
    assert np.all(rep.cost_high <= rep.cost_low)


def test_report_files(point, tmp_path):
    dp, gains = point
    rep = simulate_closed_loop(PLANT, dp, gains, 0.8, replicates=5, seed=0)
    write_report_json(rep, tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert list(data)[:3] == ["mode", "replicates", "seed"]
    assert data["cost_empirical"] is None  # not measured in bernoulli mode
    write_report_csv(rep, tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert len(rows) == 2 and rows[0][0] == "mode"
    write_report_csv(rep, tmp_path / "p.csv", per_replicate=True)
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert len(rows) == 6 and rows[0][0] == "replicate"
