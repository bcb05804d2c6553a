"""Deadline-constrained maximum-reliability forwarding.

A single packet starts at ``source`` at slot 0 and must sit at the
destination ``Z`` after ``D`` slots.  In each slot the node holding the
packet either holds it or attempts one transmission to an out-neighbor
(success with probability ``1 - p_ij``, one unit of energy).

Action tables are ``(Z, D)`` integer arrays indexed by ``[node - 1, t]``;
an entry equal to the node's own id means HOLD.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .model import NetworkTopology

HOLD = "HOLD"
COST_RTOL = 1e-9
BISECTION_WIDTH = 1e-12
TIE_TOL = 1e-10
MAX_TIE_COMBOS = 4096
GUARD_NODES = 4
GUARD_SLOTS = 4


class InstanceTooLarge(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class UtilityTable:
    u_star: np.ndarray
    rho_star: np.ndarray
    c_star: np.ndarray
    delta: float

    def at(self, node: int, t: int = 0):
        """``(U, rho, C)`` of ``node`` at slot ``t``."""
        return (float(self.u_star[node - 1, t]), float(self.rho_star[node - 1, t]),
                float(self.c_star[node - 1, t]))


@dataclass(frozen=True, eq=False)
class DeterministicPolicy:
    action: np.ndarray
    reliability: float
    energy: float

    @property
    def deadline_slots(self) -> int:
        return self.action.shape[1]

    def table(self) -> list:
        """Rows are nodes, columns slots; entries are next-hop ids or ``"HOLD"``."""
        rows = []
        for i, row in enumerate(self.action, start=1):
            rows.append([HOLD if int(a) == i else int(a) for a in row])
        return rows

    @classmethod
    def from_table(cls, rows, reliability=math.nan, energy=math.nan) -> "DeterministicPolicy":
        action = np.array([[i if a == HOLD else int(a) for a in row]
                           for i, row in enumerate(rows, start=1)], dtype=np.int64)
        if action.size == 0:
            action = action.reshape(len(rows), 0)
        return cls(action, reliability, energy)


@dataclass(frozen=True, eq=False)
class RandomizedPolicy:
    """Per-packet mixture: ``pi1`` with probability ``theta1``, else ``pi2``."""

    pi1: DeterministicPolicy
    pi2: DeterministicPolicy
    theta1: float
    theta2: float
    reliability: float
    energy: float
    c_req: float
    delta_star: float

    @property
    def c1(self) -> float:
        return self.pi1.energy

    @property
    def c2(self) -> float:
        return self.pi2.energy

    def to_dict(self) -> dict:
        return {
            "rho_star": self.reliability,
            "expected_cost": self.energy,
            "c_req": None if math.isinf(self.c_req) else self.c_req,
            "theta1": self.theta1,
            "theta2": self.theta2,
            "C1": self.c1,
            "C2": self.c2,
            "rho1": self.pi1.reliability,
            "rho2": self.pi2.reliability,
            "delta_star": self.delta_star,
            "policy1": self.pi1.table(),
            "policy2": self.pi2.table(),
        }

    def summary(self) -> dict:
        d = self.to_dict()
        return {k: d[k] for k in ("rho_star", "C1", "C2", "theta1", "theta2", "delta_star",
                                  "expected_cost")}


def _check_args(topology: NetworkTopology, source: int, deadline_slots: int):
    if deadline_slots < 0:
        raise ValueError("deadline_slots must be >= 0")
    if not 1 <= source <= topology.node_count:
        raise ValueError(f"source {source} is not a node")


def bellman_update(node, out_links, own_next, neighbor_next, delta):
    """One Bellman backup at ``node``.

    ``own_next`` is the node's ``(U, rho, C)`` at ``t + 1`` and
    ``neighbor_next[j]`` the same triple for each out-neighbor.  HOLD wins
    ties against every neighbor; among neighbors the lowest id wins.
    Returns ``(U, rho, C, action)``.
    """
    u_i, rho_i, c_i = own_next
    best_u, best_j = u_i, node
    for j, p in out_links:
        u = (1.0 - p) * neighbor_next[j][0] + p * u_i - delta
        if u > best_u:
            best_u, best_j = u, j
    if best_j == node:
        return u_i, rho_i, c_i, node
    p = dict(out_links)[best_j]
    _, rho_j, c_j = neighbor_next[best_j]
    rho = (1.0 - p) * rho_j + p * rho_i
    cost = (1.0 - p) * c_j + p * c_i + 1.0
    return best_u, rho, cost, best_j


def solve_weighted_sum(topology: NetworkTopology, source: int, deadline_slots: int,
                       delta: float):
    """Maximise ``rho - delta * C`` by backward induction over the slots.

    Returns the full :class:`UtilityTable` and the optimal deterministic
    policy; the policy's reliability/energy are those seen from ``source``
    at slot 0.
    """
    _check_args(topology, source, deadline_slots)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    z, d = topology.node_count, deadline_slots
    links = topology.out_neighbors()
    u = [[0.0] * (d + 1) for _ in range(z)]
    rho = [[0.0] * (d + 1) for _ in range(z)]
    cost = [[0.0] * (d + 1) for _ in range(z)]
    action = [[i + 1] * d for i in range(z)]
    for t in range(d + 1):
        u[z - 1][t] = 1.0
        rho[z - 1][t] = 1.0
    for t in range(d - 1, -1, -1):
        for i in range(1, z):
            nxt = {j: (u[j - 1][t + 1], rho[j - 1][t + 1], cost[j - 1][t + 1])
                   for j, _ in links[i]}
            own = (u[i - 1][t + 1], rho[i - 1][t + 1], cost[i - 1][t + 1])
            u[i - 1][t], rho[i - 1][t], cost[i - 1][t], action[i - 1][t] = \
                bellman_update(i, links[i], own, nxt, delta)
    table = UtilityTable(np.array(u), np.array(rho), np.array(cost), float(delta))
    act = np.array(action, dtype=np.int64).reshape(z, d)
    policy = DeterministicPolicy(act, rho[source - 1][0], cost[source - 1][0])
    return table, policy


def evaluate_policy(topology: NetworkTopology, policy: DeterministicPolicy, source: int,
                    deadline_slots: int):
    """Exact ``(rho, cost)`` of a deterministic action table by forward propagation."""
    _check_args(topology, source, deadline_slots)
    z = topology.node_count
    action = np.asarray(policy.action if isinstance(policy, DeterministicPolicy) else policy)
    if action.shape != (z, deadline_slots):
        raise ValueError(f"action table has shape {action.shape}, expected {(z, deadline_slots)}")
    mass = np.zeros(z)
    mass[source - 1] = 1.0
    spent = 0.0
    for t in range(deadline_slots):
        new = np.zeros(z)
        new[z - 1] = mass[z - 1]
        for i in range(1, z):
            m = mass[i - 1]
            if m == 0.0:
                continue
            j = int(action[i - 1, t])
            if j == i:
                new[i - 1] += m
                continue
            p = topology.loss(i, j)
            spent += m
            new[j - 1] += m * (1.0 - p)
            new[i - 1] += m * p
        mass = new
    return float(mass[z - 1]), float(spent)


def _cost_le(c, c_req):
    return c <= c_req + COST_RTOL * max(1.0, abs(c_req))


def _tied_policies(topology, source, deadline_slots, delta, table):
    """All deterministic tables built from actions within ``TIE_TOL`` of optimal at ``delta``.

    Only slots/nodes reachable from ``source`` are branched on.  Returns
    ``None`` when the number of combinations exceeds ``MAX_TIE_COMBOS``.
    """
    z, d = topology.node_count, deadline_slots
    links = topology.out_neighbors()
    u = table.u_star
    choices = []
    reach = {source}
    for t in range(d):
        for i in sorted(reach):
            if i == z:
                continue
            opts = [i]
            best = u[i - 1, t]
            for j, p in links[i]:
                val = (1.0 - p) * u[j - 1, t + 1] + p * u[i - 1, t + 1] - delta
                if val >= best - TIE_TOL:
                    opts.append(j)
            choices.append(((i, t), opts))
        reach = reach | {j for i in reach if i != z for j, _ in links[i]}
    total = 1
    for _, opts in choices:
        total *= len(opts)
        if total > MAX_TIE_COMBOS:
            return None
    base = np.array([[i] * d for i in range(1, z + 1)], dtype=np.int64).reshape(z, d)
    out = []
    for combo in itertools.product(*(opts for _, opts in choices)):
        act = base.copy()
        for ((i, t), _), a in zip(choices, combo):
            act[i - 1, t] = a
        r, c = evaluate_policy(topology, act, source, d)
        out.append(DeterministicPolicy(act, r, c))
    return out


def _mix(p1, p2, c_req, delta_star):
    c1, c2 = p1.energy, p2.energy
    if c2 - c1 <= 0.0:
        return RandomizedPolicy(p1, p1, 1.0, 0.0, p1.reliability, c1, c_req, delta_star)
    theta2 = min(1.0, max(0.0, (c_req - c1) / (c2 - c1)))
    theta1 = 1.0 - theta2
    rho = p1.reliability + theta2 * (p2.reliability - p1.reliability)
    return RandomizedPolicy(p1, p2, theta1, theta2, rho, theta1 * c1 + theta2 * c2,
                            c_req, delta_star)


def solve_constrained(topology: NetworkTopology, source: int, deadline_slots: int,
                      c_req: float) -> RandomizedPolicy:
    """Maximum reliability subject to an expected-transmission budget ``c_req``.

    The optimal policy randomises per packet between two deterministic
    policies that are both optimal for the weighted-sum problem at a common
    multiplier.  The multiplier is located by bisection on ``[0, 1]``
    because ``C*(delta)`` is a non-increasing step function and no policy
    transmits once ``delta >= 1``.
    """
    _check_args(topology, source, deadline_slots)
    if not c_req >= 0:
        raise ValueError("c_req must be >= 0")
    _, free = solve_weighted_sum(topology, source, deadline_slots, 0.0)
    if _cost_le(free.energy, c_req):
        return RandomizedPolicy(free, free, 1.0, 0.0, free.reliability, free.energy,
                                float(c_req), 0.0)

    lo, hi = 0.0, 1.0
    pol_lo = free
    _, pol_hi = solve_weighted_sum(topology, source, deadline_slots, hi)
    while hi - lo >= BISECTION_WIDTH:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        _, pol = solve_weighted_sum(topology, source, deadline_slots, mid)
        if _cost_le(pol.energy, c_req):
            hi, pol_hi = mid, pol
        else:
            lo, pol_lo = mid, pol
    delta_star = 0.5 * (lo + hi)
    best = _mix(pol_hi, pol_lo, float(c_req), delta_star)

    # Frontier vertices can be collinear at the breakpoint; prefer the tied
    # policies whose costs bracket c_req most tightly.
    table, _ = solve_weighted_sum(topology, source, deadline_slots, delta_star)
    tied = _tied_policies(topology, source, deadline_slots, delta_star, table)
    if tied:
        below = [p for p in tied if _cost_le(p.energy, c_req)]
        above = [p for p in tied if not _cost_le(p.energy, c_req)]
        if below and above:
            p1 = max(below, key=lambda p: (p.energy, p.reliability))
            p2 = min(above, key=lambda p: (p.energy, -p.reliability))
            cand = _mix(p1, p2, float(c_req), delta_star)
            if cand.reliability >= best.reliability - 1e-12:
                best = cand
    return best


def unconstrained_policy(topology: NetworkTopology, source: int,
                         deadline_slots: int) -> RandomizedPolicy:
    """The delta = 0 policy wrapped as a degenerate mixture."""
    _, pol = solve_weighted_sum(topology, source, deadline_slots, 0.0)
    return RandomizedPolicy(pol, pol, 1.0, 0.0, pol.reliability, pol.energy, math.inf, 0.0)


def pareto_filter(points, tol=1e-12):
    """Nondominated ``(rho, C)`` points sorted by cost (more rho, less C is better)."""
    pts = sorted(set((float(r), float(c)) for r, c in points), key=lambda x: (x[1], -x[0]))
    front = []
    best_rho = -math.inf
    for r, c in pts:
        if r > best_rho + tol:
            if front and abs(front[-1][1] - c) <= tol:
                front[-1] = (r, c)
            else:
                front.append((r, c))
            best_rho = r
    return front


def _prune_dominated(vecs: np.ndarray) -> np.ndarray:
    """Drop rows dominated in the product order (columns alternate rho, -C)."""
    if len(vecs) <= 1:
        return vecs
    vecs = np.unique(vecs, axis=0)
    order = np.argsort(-vecs.sum(axis=1), kind="stable")
    vecs = vecs[order]
    keep = []
    for k in range(len(vecs)):
        v = vecs[k]
        if keep:
            kept = vecs[keep]
            if np.any(np.all(kept >= v, axis=1)):
                continue
        keep.append(k)
    return vecs[keep]


def brute_force_policies(topology: NetworkTopology, source: int, deadline_slots: int):
    """Pareto frontier of ``(rho, C)`` over every deterministic time-indexed table.

    Tail tables are enumerated backward in time.  For each tail the vector
    of ``(rho_i, C_i)`` over the nodes reachable at that slot is kept unless
    another tail is at least as good at every node, which cannot remove any
    point of the final frontier.
    """
    _check_args(topology, source, deadline_slots)
    z, d = topology.node_count, deadline_slots
    if z > GUARD_NODES or d > GUARD_SLOTS:
        raise InstanceTooLarge(f"brute force is limited to |N| <= {GUARD_NODES} and "
                               f"D <= {GUARD_SLOTS} (got {z}, {d})")
    if source == z:
        return [(1.0, 0.0)]
    links = topology.out_neighbors()
    reach = [[source]]
    for t in range(1, d + 1):
        prev = set(reach[-1])
        nxt = prev | {j for i in prev for j, _ in links[i] if j != z}
        reach.append(sorted(nxt))

    # tails: array (K, 2 * len(reach[t])) with columns (rho_i, -C_i) per node
    nodes_next = reach[d]
    tails = np.zeros((1, 2 * len(nodes_next)))
    for t in range(d - 1, -1, -1):
        nodes = reach[t]
        col = {i: k for k, i in enumerate(nodes_next)}
        options = []
        for i in nodes:
            opts = [(i, None)] + [(j, p) for j, p in links[i]]
            options.append(opts)
        rows = []
        for tail in tails:
            def rc(j):
                if j == z:
                    return 1.0, 0.0
                k = col[j]
                return tail[2 * k], -tail[2 * k + 1]

            per_node = []
            for i, opts in zip(nodes, options):
                r_i, c_i = rc(i)
                vals = []
                for j, p in opts:
                    if p is None:
                        vals.append((r_i, c_i))
                    else:
                        r_j, c_j = rc(j)
                        vals.append(((1.0 - p) * r_j + p * r_i, (1.0 - p) * c_j + p * c_i + 1.0))
                per_node.append(vals)
            for combo in itertools.product(*per_node):
                row = []
                for r, c in combo:
                    row.extend((r, -c))
                rows.append(row)
        tails = _prune_dominated(np.array(rows, dtype=float).reshape(len(rows), 2 * len(nodes)))
        nodes_next = nodes
    points = [(row[0], 0.0 - row[1]) for row in tails] if d > 0 else [(0.0, 0.0)]
    return pareto_filter(points)


def enumerate_all_policies(topology: NetworkTopology, source: int, deadline_slots: int):
    """Every action table over the reachable states with its exact ``(rho, C)``.

    Exhaustive and exponential; meant for cross-checking on tiny instances.
    """
    _check_args(topology, source, deadline_slots)
    z, d = topology.node_count, deadline_slots
    links = topology.out_neighbors()
    reach, cur = [], {source}
    for t in range(d):
        reach.append(sorted(i for i in cur if i != z))
        cur = cur | {j for i in cur if i != z for j, _ in links[i]}
    slots = [(i, t) for t in range(d) for i in reach[t]]
    opts = [[i] + [j for j, _ in links[i]] for i, _ in slots]
    base = np.array([[i] * d for i in range(1, z + 1)], dtype=np.int64).reshape(z, d)
    out = []
    for combo in itertools.product(*opts):
        act = base.copy()
        for (i, t), a in zip(slots, combo):
            act[i - 1, t] = a
        out.append((act, evaluate_policy(topology, act, source, d)))
    return out


def concave_envelope(frontier, c_req: float) -> float:
    """Upper concave envelope of ``(rho, C)`` points evaluated at ``c_req``."""
    pts = sorted(frontier, key=lambda x: (x[1], x[0]))
    hull = []
    for r, c in pts:
        while hull and hull[-1][1] == c and hull[-1][0] <= r:
            hull.pop()
        if hull and hull[-1][1] == c:
            continue
        while len(hull) >= 2:
            (r1, c1), (r2, c2) = hull[-2], hull[-1]
            # drop the middle point if it lies on/below the chord
            if (r2 - r1) * (c - c1) <= (r - r1) * (c2 - c1):
                hull.pop()
            else:
                break
        hull.append((r, c))
    if c_req >= hull[-1][1]:
        return max(r for r, _ in hull)
    for (r1, c1), (r2, c2) in zip(hull, hull[1:]):
        if c1 <= c_req <= c2:
            return r1 + (c_req - c1) / (c2 - c1) * (r2 - r1)
    return hull[0][0]


class _Node:
    """Node-local DP state: own outgoing link statistics plus a mailbox."""

    def __init__(self, node_id, out_links, is_destination):
        self.id = node_id
        self.out_links = out_links
        self.is_destination = is_destination
        self.value = (1.0, 1.0, 0.0) if is_destination else (0.0, 0.0, 0.0)
        self.mailbox = {}

    def receive(self, sender, payload):
        self.mailbox[sender] = payload

    def step(self, delta):
        if self.is_destination:
            return self.id
        u, rho, c, a = bellman_update(self.id, self.out_links, self.value, self.mailbox, delta)
        self.value = (u, rho, c)
        return a


def distributed_dp(topology: NetworkTopology, deadline_slots: int, delta: float,
                   return_messages: bool = False):
    """Message-passing emulation of the backward DP.

    Every node only knows its outgoing links and the utilities its
    out-neighbors have sent it.  After computing its slot-``t`` value a
    non-destination node sends it to each in-neighbor.  The destination's
    value is the known constant 1 and is pre-loaded into mailboxes.
    """
    if deadline_slots < 0 or delta < 0:
        raise ValueError("deadline_slots and delta must be >= 0")
    z, d = topology.node_count, deadline_slots
    links = topology.out_neighbors()
    nodes = {i: _Node(i, links[i], i == z) for i in range(1, z + 1)}
    for i in range(1, z + 1):
        for j, _ in links[i]:
            nodes[i].receive(j, nodes[j].value)
    u = np.zeros((z, d + 1))
    rho = np.zeros((z, d + 1))
    cost = np.zeros((z, d + 1))
    u[:, d], rho[:, d], cost[:, d] = zip(*(nodes[i].value for i in range(1, z + 1)))
    u[z - 1, :] = 1.0
    rho[z - 1, :] = 1.0
    messages = 0
    for t in range(d - 1, -1, -1):
        outbox = []
        for i in range(1, z):
            nodes[i].step(delta)
            u[i - 1, t], rho[i - 1, t], cost[i - 1, t] = nodes[i].value
            for j in topology.in_neighbors(i):
                outbox.append((j, i, nodes[i].value))
        # deliver after the slot so every node used slot t+1 values
        for j, i, payload in outbox:
            nodes[j].receive(i, payload)
            messages += 1
    table = UtilityTable(u, rho, cost, float(delta))
    return (table, messages) if return_messages else table


def write_policy_json(policy: RandomizedPolicy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy.to_dict(), fh, indent=2)
        fh.write("\n")
