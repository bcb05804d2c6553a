"""Monte Carlo closed-loop simulation under random packet loss.

Two fidelities are supported:

``"slot-level"``
    every packet is forwarded through the network slot by slot under the
    randomized forwarding policy, each attempted link transmission failing
    independently with its loss probability;
``"bernoulli"``
    each sample is delivered independently with probability ``rho``.

Every replicate owns independent random streams per role (process noise,
measurement noise, initial state, policy mixing, link draws, coupling).
Streams are Philox generators keyed by ``(seed, role, replicate)``, so two
runs that share a seed see the same plant noise whatever the loss mode.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .discretize import DiscretePlant
from .lqg import ControllerGains, LOEWNER_TOL, riccati_control, _deterministic_part, _delta
from .model import ContinuousPlant, NetworkTopology
from .netdp import RandomizedPolicy

DEFAULT_HORIZON_S = 500.0
MODES = ("slot-level", "bernoulli")
ROLES = {
    "process-noise": 0,
    "measurement-noise": 1,
    "initial-state": 2,
    "policy-mix": 3,
    "link-draws": 4,
    "coupling-omega": 5,
}
# draws held in memory at once, per stream kind
_BLOCK_BUDGET = 2_000_000


def stream(seed: int, role: str, replicate: int) -> np.random.Generator:
    """Independent generator for one replicate and one role."""
    key = np.random.SeedSequence([int(seed), ROLES[role], int(replicate)])
    return np.random.Generator(np.random.Philox(key))


def sqrt_psd(x: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clipped to zero."""
    w, v = np.linalg.eigh(0.5 * (x + x.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass
class SimulationReport:
    """Aggregate Monte Carlo result; costs are per sampling step.

    ``j_empirical`` averages the optimal expected loss given each replicate's
    realized delivery sequence.  ``j_realized`` averages the quadratic cost
    of the simulated sample paths; both estimate the same quantity.
    """

    j_empirical_mean: float
    j_empirical_stderr: float
    rho_empirical: float
    cost_empirical: float
    replicates: int
    seed: int
    mode: str
    n_steps: int
    h_s: float
    rho_target: float
    j_realized_mean: float = math.nan
    j_realized_stderr: float = math.nan
    per_replicate: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        keys = ("mode", "replicates", "seed", "n_steps", "h_s", "rho_target",
                "j_empirical_mean", "j_empirical_stderr", "j_realized_mean",
                "j_realized_stderr", "rho_empirical", "cost_empirical")
        return {k: _json_float(getattr(self, k)) for k in keys}


def _json_float(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _mean_stderr(values: np.ndarray):
    values = np.asarray(values, dtype=float)
    count = values.size
    total = float(np.sum(values))
    mean = total / count
    if count < 2:
        return mean, math.inf
    sq = float(np.sum((values - mean) ** 2))
    return mean, math.sqrt(sq / (count - 1) / count)


def _block_len(replicates: int, width: int, n_steps: int) -> int:
    return int(max(1, min(n_steps, _BLOCK_BUDGET // max(1, replicates * width))))


class _Normals:
    """Blockwise standard normals for a set of per-replicate streams."""

    def __init__(self, gens, width, factor):
        self.gens = gens
        self.width = width
        self.factor = factor

    def block(self, length):
        z = np.stack([g.standard_normal((length, self.width)) for g in self.gens])
        return z @ self.factor.T


def _run(dp: DiscretePlant, gains: ControllerGains, replicates: int, seed: int,
         loss_blocks, branches: int = 1, trajectory: bool = True, observer=None):
    """Shared closed-loop engine.

    ``loss_blocks(length)`` returns a boolean ``(branches, replicates, length)``
    delivery array.  All branches share plant noise.  Returns per-replicate
    totals of the optimal expected loss and of the realized path cost, both
    shaped ``(branches, replicates)``.

    Arrays keep the replicate axis last so the small matrix products run as
    single BLAS calls over all replicates.
    """
    n_steps = gains.s_seq.shape[0] - 1
    k, n = dp.dim, dp.n
    c = dp.c_ext
    q = c.shape[0]
    phi, gamma, rvt = dp.phi, dp.gamma, dp.rv_tilde
    width = branches * replicates

    p = np.repeat((0.5 * (dp.p0 + dp.p0.T))[:, :, None], width, axis=2)
    eq19 = np.full(width, _deterministic_part(dp, gains, None))
    realized = np.zeros(width)

    if trajectory:
        rep = range(replicates)
        x0 = np.stack([stream(seed, "initial-state", r).standard_normal(n) for r in rep])
        xi = np.zeros((k, width))
        xi[:n] = np.tile(sqrt_psd(dp.p0[:n, :n]) @ x0.T, branches)
        xhat = np.zeros((k, width))
        proc = _Normals([stream(seed, "process-noise", r) for r in rep], n, sqrt_psd(dp.rv))
        meas = _Normals([stream(seed, "measurement-noise", r) for r in rep], q, sqrt_psd(dp.rw))
        zz = np.block([[dp.xi_xx, dp.xi_xu], [dp.xi_xu.T, dp.xi_uu]])

    block = _block_len(width, max(1, n + q), n_steps)
    delta = None
    step = 0
    while step < n_steps:
        length = min(block, n_steps - step)
        delivered = loss_blocks(length).reshape(width, length)
        if trajectory:
            v_blk = np.tile(proc.block(length).transpose(1, 2, 0), branches)
            w_blk = np.tile(meas.block(length).transpose(1, 2, 0), branches)
        for j in range(length):
            kk = step + j
            got = delivered[:, j]
            pct = np.tensordot(c, p, axes=(1, 0))  # (q, k, M) = C P
            s = np.tensordot(c, pct, axes=(1, 1)) + dp.rw[:, :, None]
            if q == 1:
                gain = (pct[0] / s[0, 0])[:, None, :]
            else:
                gain = np.moveaxis(np.linalg.solve(np.moveaxis(s, 2, 0),
                                                   np.moveaxis(pct, 2, 0)), 0, 2)
                gain = np.swapaxes(gain, 0, 1)  # (k, q, M) = P C^T S^-1
            upd = np.einsum("iqM,qjM->ijM", gain, pct)
            p = p - got * upd
            p = 0.5 * (p + p.transpose(1, 0, 2))
            if observer is not None:
                observer(kk, p)
            if delta is None or not np.array_equal(gains.s_seq[kk], gains.s_seq[kk - 1]) \
                    or not np.array_equal(gains.s_seq[kk + 1], gains.s_seq[kk]):
                delta = _delta(gains.s_seq[kk + 1], gains.s_seq[kk], dp)
            eq19 += delta.T.ravel() @ p.reshape(k * k, width)
            if trajectory:
                innov = (c @ xi + w_blk[j]) - c @ xhat
                xhat = xhat + got * np.einsum("iqM,qM->iM", gain, innov)
                u = gains.l_seq[kk] @ xhat
                z = np.vstack([xi, u])
                realized += np.sum(z * (zz @ z), axis=0)
                xi = phi @ xi + gamma @ u
                xi[:n] += v_blk[j]
                xhat = phi @ xhat + gamma @ u
            a = (phi @ p.reshape(k, -1)).reshape(k, k, width)
            p = (phi @ a.transpose(1, 0, 2).reshape(k, -1)).reshape(k, k, width)
            p = p.transpose(1, 0, 2) + rvt[:, :, None]
        step += length
    if trajectory:
        realized += np.sum(xi * (dp.xi0 @ xi), axis=0)
    else:
        realized[:] = math.nan
    return eq19.reshape(branches, replicates), realized.reshape(branches, replicates)


def _ensure_gains(dp: DiscretePlant, gains: Optional[ControllerGains], n_steps: int):
    if gains is not None and gains.finite and gains.s_seq.shape[0] == n_steps + 1:
        return gains
    return riccati_control(dp, finite_horizon=True)


def _with_steps(dp: DiscretePlant, horizon_s: Optional[float]) -> DiscretePlant:
    if horizon_s is not None:
        return dp.with_horizon(horizon_s)
    if dp.n_steps is None:
        return dp.with_horizon(DEFAULT_HORIZON_S)
    return dp


def _check_dims(plant: Optional[ContinuousPlant], dp: DiscretePlant):
    if plant is None:
        return
    if (plant.n, plant.m, plant.q) != (dp.n, dp.m, dp.c_ext.shape[0]):
        raise ValueError(f"plant dimensions (n={plant.n}, m={plant.m}, q={plant.q}) do not "
                         f"match the discretized plant (n={dp.n}, m={dp.m}, "
                         f"q={dp.c_ext.shape[0]})")


class _SlotForwarder:
    """Vectorised slot-by-slot forwarding of one packet per replicate and sample."""

    def __init__(self, policy: RandomizedPolicy, topology: NetworkTopology, source: int,
                 seed: int, replicates: int):
        z = topology.node_count
        self.actions = np.stack([policy.pi1.action, policy.pi2.action])  # (2, Z, D)
        self.d = self.actions.shape[2]
        loss = np.ones((z + 1, z + 1))
        for link in topology.links:
            loss[link.src, link.dst] = link.p_loss
        self.loss = loss
        self.theta1 = policy.theta1
        self.source = source
        self.dest = z
        self.mix = [stream(seed, "policy-mix", r) for r in range(replicates)]
        self.links = [stream(seed, "link-draws", r) for r in range(replicates)]
        self.delivered = 0
        self.sent = 0
        self.packets = 0
        self.per_rep_delivered = np.zeros(replicates, dtype=np.int64)
        self.per_rep_sent = np.zeros(replicates, dtype=np.int64)

    def block(self, length):
        reps = len(self.mix)
        which = np.stack([g.random(length) for g in self.mix]) >= self.theta1  # True -> pi2
        draws = np.stack([g.random((length, self.d)) for g in self.links])
        node = np.full((reps, length), self.source, dtype=np.int64)
        sent = np.zeros((reps, length), dtype=np.int64)
        idx = which.astype(np.int64)
        for t in range(self.d):
            nxt = self.actions[idx, node - 1, t]
            tx = (nxt != node) & (node != self.dest)
            ok = tx & (draws[:, :, t] >= self.loss[node, nxt])
            sent += tx
            node = np.where(ok, nxt, node)
        got = node == self.dest
        self.per_rep_delivered += got.sum(axis=1)
        self.per_rep_sent += sent.sum(axis=1)
        self.delivered += int(got.sum())
        self.sent += int(sent.sum())
        self.packets += got.size
        return got[None]


class _BernoulliLoss:
    def __init__(self, rhos, seed, replicates, role):
        self.rhos = np.asarray(rhos, dtype=float)
        self.gens = [stream(seed, role, r) for r in range(replicates)]
        self.per_rep_delivered = np.zeros((self.rhos.size, replicates), dtype=np.int64)

    def block(self, length):
        omega = np.stack([g.random(length) for g in self.gens])
        got = omega[None] < self.rhos[:, None, None]
        self.per_rep_delivered += got.sum(axis=2)
        return got


def simulate_closed_loop(plant: Optional[ContinuousPlant], dp: DiscretePlant,
                         gains: Optional[ControllerGains],
                         policy: Union[RandomizedPolicy, float],
                         topology: Optional[NetworkTopology] = None,
                         replicates: int = 1000, seed: int = 0, mode: str = "bernoulli",
                         horizon_s: Optional[float] = None, trajectory: bool = True,
                         source: int = 1, slot_ms: Optional[float] = None) -> SimulationReport:
    """Monte Carlo estimate of the closed-loop loss at one design point.

    Parameters
    ----------
    plant : ContinuousPlant or None
        Used only to check dimensions.
    dp : DiscretePlant
        Discretized plant; its horizon is used unless ``horizon_s`` is given,
        and an infinite horizon is replaced by 500 s.
    gains : ControllerGains or None
        Finite-horizon gains matching the horizon; computed when missing.
    policy : RandomizedPolicy or float
        Forwarding policy, or a fixed delivery probability (bernoulli only).
    topology : NetworkTopology
        Required in slot-level mode.
    mode : {"slot-level", "bernoulli"}
    trajectory : bool
        Also simulate the plant and estimator on sample noise.  The expected
        loss given each delivery sequence does not need it.

    Returns
    -------
    SimulationReport
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if replicates <= 0:
        raise ValueError("replicates must be positive")
    _check_dims(plant, dp)
    dp = _with_steps(dp, horizon_s)
    n_steps = dp.n_steps
    gains = _ensure_gains(dp, gains, n_steps)

    if isinstance(policy, RandomizedPolicy):
        rho = policy.reliability
    else:
        rho = float(policy)
        if not 0.0 <= rho <= 1.0:
            raise ValueError("delivery probability must lie in [0, 1]")

    if mode == "slot-level":
        if not isinstance(policy, RandomizedPolicy) or topology is None:
            raise ValueError("slot-level mode needs a forwarding policy and a topology")
        if policy.pi1.action.shape[0] != topology.node_count:
            raise ValueError("policy and topology disagree on the number of nodes")
        slot_ms = topology.slot_ms if slot_ms is None else slot_ms
        d_expected = int(math.floor(dp.tau_s * 1000.0 / slot_ms + 1e-9))
        if policy.pi1.deadline_slots != d_expected:
            raise ValueError(f"policy has {policy.pi1.deadline_slots} slots but the lag allows "
                             f"{d_expected}")
        loss = _SlotForwarder(policy, topology, source, seed, replicates)
    else:
        loss = _BernoulliLoss([rho], seed, replicates, "link-draws")

    eq19, realized = _run(dp, gains, replicates, seed, loss.block, trajectory=trajectory)
    per_step = eq19[0] / n_steps
    path = realized[0] / n_steps
    j_mean, j_err = _mean_stderr(per_step)
    r_mean, r_err = (_mean_stderr(path) if trajectory else (math.nan, math.nan))

    if mode == "slot-level":
        delivered = loss.per_rep_delivered
        rho_emp = loss.delivered / loss.packets
        cost_emp = loss.sent / loss.packets
        sent = loss.per_rep_sent
    else:
        delivered = loss.per_rep_delivered[0]
        rho_emp = float(delivered.sum()) / (replicates * n_steps)
        cost_emp = math.nan
        sent = None
    per_rep = {
        "replicate": np.arange(replicates),
        "j_empirical": per_step,
        "j_realized": path,
        "rho_empirical": delivered / n_steps,
        "cost_empirical": (sent / n_steps) if sent is not None else np.full(replicates, math.nan),
    }
    return SimulationReport(j_mean, j_err, float(rho_emp), float(cost_emp), replicates,
                            int(seed), mode, n_steps, dp.h_s, float(rho), r_mean, r_err,
                            per_rep)


@dataclass
class CouplingReport:
    rho_low: float
    rho_high: float
    replicates: int
    seed: int
    n_steps: int
    cost_low: np.ndarray = field(repr=False)
    cost_high: np.ndarray = field(repr=False)
    cost_violations: int
    loewner_violations: int
    worst_loewner_eig: float
    high_all_delivered: bool

    def to_dict(self) -> dict:
        return {
            "rho_low": self.rho_low,
            "rho_high": self.rho_high,
            "replicates": self.replicates,
            "seed": self.seed,
            "n_steps": self.n_steps,
            "cost_violations": self.cost_violations,
            "loewner_violations": self.loewner_violations,
            "worst_loewner_eig": self.worst_loewner_eig,
            "high_all_delivered": self.high_all_delivered,
        }


def coupling_experiment(plant: Optional[ContinuousPlant], dp: DiscretePlant,
                        gains: Optional[ControllerGains], rho_low: float, rho_high: float,
                        replicates: int = 1000, seed: int = 0,
                        horizon_s: Optional[float] = None, trajectory: bool = False,
                        tol: float = LOEWNER_TOL) -> CouplingReport:
    """Pathwise comparison of two loss rates on a common probability space.

    One uniform sequence ``omega`` per replicate drives both loss processes,
    ``rho_k = 1{omega_k < rho}``.  The expected loss given each sequence and
    the estimation-error covariances are compared realization by realization;
    the more reliable sequence must never do worse.
    """
    if not 0.0 <= rho_low <= rho_high <= 1.0:
        raise ValueError("need 0 <= rho_low <= rho_high <= 1")
    if replicates <= 0:
        raise ValueError("replicates must be positive")
    _check_dims(plant, dp)
    dp = _with_steps(dp, horizon_s)
    gains = _ensure_gains(dp, gains, dp.n_steps)
    loss = _BernoulliLoss([rho_low, rho_high], seed, replicates, "coupling-omega")
    state = {"violations": np.zeros(replicates, dtype=bool), "worst": math.inf}

    def observer(_, p):
        pb = np.moveaxis(p, 2, 0).reshape(2, replicates, p.shape[0], p.shape[1])
        eig = np.linalg.eigvalsh(pb[0] - pb[1])
        low = eig.min(axis=-1)
        scale = np.maximum(1.0, np.abs(pb[0]).max(axis=(-1, -2)))
        state["violations"] |= low < -tol * scale
        state["worst"] = min(state["worst"], float(low.min()))

    eq19, _ = _run(dp, gains, replicates, seed, loss.block, branches=2,
                   trajectory=trajectory, observer=observer)
    low_cost, high_cost = eq19
    scale = np.maximum(1.0, np.abs(low_cost))
    cost_viol = int(np.sum(high_cost > low_cost + 1e-12 * scale))
    return CouplingReport(float(rho_low), float(rho_high), replicates, int(seed), dp.n_steps,
                          low_cost, high_cost, cost_viol, int(state["violations"].sum()),
                          state["worst"],
                          bool(np.all(loss.per_rep_delivered[1] == dp.n_steps)))


def write_report_json(report: SimulationReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")


REPORT_COLUMNS = ("mode", "replicates", "seed", "n_steps", "h_s", "rho_target",
                  "j_empirical_mean", "j_empirical_stderr", "j_realized_mean",
                  "j_realized_stderr", "rho_empirical", "cost_empirical")
REPLICATE_COLUMNS = ("replicate", "j_empirical", "j_realized", "rho_empirical",
                     "cost_empirical")


def write_report_csv(report: SimulationReport, path, per_replicate: bool = False) -> None:
    """Summary row, or one row per replicate when ``per_replicate`` is set."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not per_replicate:
            writer.writerow(REPORT_COLUMNS)
            writer.writerow([_fmt(getattr(report, c)) for c in REPORT_COLUMNS])
            return
        writer.writerow(REPLICATE_COLUMNS)
        cols = [report.per_replicate[c] for c in REPLICATE_COLUMNS]
        for row in zip(*cols):
            writer.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
