"""Domain types and JSON ingestion for plants, topologies and design configs.

Matrices are stored row-major as nested lists in the files and as float64
numpy arrays in memory.  Every loader validates the type invariants and
raises :class:`ValidationError` naming the offending field.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SYM_TOL = 1e-12
PSD_TOL = -1e-10


class ConfigError(ValueError):
    """Base class for configuration problems."""


class ParseError(ConfigError):
    """The file could not be read or is not in the documented schema."""


class ValidationError(ConfigError):
    """A loaded value violates one of its type invariants."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


def _as_matrix(name, value) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValidationError(name, f"not a numeric matrix ({exc})") from None
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValidationError(name, f"expected a 2-D matrix, got {arr.ndim}-D")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(name, "contains non-finite entries")
    return arr


def _check_shape(name, arr, shape):
    if arr.shape != shape:
        raise ValidationError(name, f"expected shape {shape}, got {arr.shape}")


def _check_symmetric(name, arr):
    if arr.shape[0] != arr.shape[1]:
        raise ValidationError(name, f"must be square, got {arr.shape}")
    scale = max(1.0, float(np.max(np.abs(arr))) if arr.size else 1.0)
    if np.max(np.abs(arr - arr.T), initial=0.0) > SYM_TOL * scale:
        raise ValidationError(name, "must be symmetric")


def _check_psd(name, arr):
    _check_symmetric(name, arr)
    if arr.size and np.min(np.linalg.eigvalsh(0.5 * (arr + arr.T))) < PSD_TOL:
        raise ValidationError(name, "must be positive semidefinite")


def _check_pd(name, arr):
    _check_symmetric(name, arr)
    if np.min(np.linalg.eigvalsh(0.5 * (arr + arr.T))) <= 0.0:
        raise ValidationError(name, "must be positive definite")


@dataclass(frozen=True, eq=False)
class ContinuousPlant:
    """Continuous-time LTI plant with Wiener process noise and quadratic loss.

    Attributes
    ----------
    a_matrix, b_matrix, c_matrix : ndarray
        System, input and output matrices (n×n, n×m, q×n).
    rv_c : ndarray
        Incremental covariance of the process noise (n×n).
    rw : ndarray
        Covariance of the sampled measurement noise (q×q).
    sigma0 : ndarray
        Covariance of the zero-mean initial state (n×n).
    q_xx, q_xu, q_uu, q0 : ndarray
        Running state, cross and input weights and the terminal weight.
    """

    a_matrix: np.ndarray
    b_matrix: np.ndarray
    c_matrix: np.ndarray
    rv_c: np.ndarray
    rw: np.ndarray
    sigma0: np.ndarray
    q_xx: np.ndarray
    q_xu: np.ndarray
    q_uu: np.ndarray
    q0: np.ndarray

    @property
    def n(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def m(self) -> int:
        return self.b_matrix.shape[1]

    @property
    def q(self) -> int:
        return self.c_matrix.shape[0]

    def validate(self) -> "ContinuousPlant":
        a = self.a_matrix
        if a.shape[0] != a.shape[1]:
            raise ValidationError("A", f"must be square, got {a.shape}")
        n, m, q = self.n, self.m, self.q
        _check_shape("B", self.b_matrix, (n, m))
        _check_shape("C", self.c_matrix, (q, n))
        _check_shape("Rv_c", self.rv_c, (n, n))
        _check_shape("Rw", self.rw, (q, q))
        _check_shape("Sigma0", self.sigma0, (n, n))
        _check_shape("Qxx", self.q_xx, (n, n))
        _check_shape("Qxu", self.q_xu, (n, m))
        _check_shape("Quu", self.q_uu, (m, m))
        _check_shape("Q0", self.q0, (n, n))
        for name, arr in (("Rv_c", self.rv_c), ("Rw", self.rw), ("Sigma0", self.sigma0),
                          ("Qxx", self.q_xx), ("Q0", self.q0)):
            _check_psd(name, arr)
        _check_pd("Quu", self.q_uu)
        composite = np.block([[self.q_xx, self.q_xu], [self.q_xu.T, self.q_uu]])
        _check_psd("Qxx/Qxu/Quu", composite)
        return self

    def to_dict(self) -> dict:
        return {
            "A": self.a_matrix.tolist(),
            "B": self.b_matrix.tolist(),
            "C": self.c_matrix.tolist(),
            "Rv_c": self.rv_c.tolist(),
            "Rw": self.rw.tolist(),
            "Sigma0": self.sigma0.tolist(),
            "Qxx": self.q_xx.tolist(),
            "Qxu": self.q_xu.tolist(),
            "Quu": self.q_uu.tolist(),
            "Q0": self.q0.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ContinuousPlant":
        if not isinstance(data, dict):
            raise ParseError("plant document must be a JSON object")
        required = ("A", "B", "C", "Rv_c", "Rw", "Qxx", "Quu")
        missing = [k for k in required if k not in data]
        if missing:
            raise ParseError(f"plant document is missing fields {missing}")
        a = _as_matrix("A", data["A"])
        b = _as_matrix("B", data["B"])
        c = _as_matrix("C", data["C"])
        if c.shape[1] == 1 and c.shape[0] == a.shape[0] != 1:
            c = c.T
        n, m = a.shape[0], b.shape[1]
        sigma0 = _as_matrix("Sigma0", data["Sigma0"]) if "Sigma0" in data else np.zeros((n, n))
        qxu = _as_matrix("Qxu", data["Qxu"]) if "Qxu" in data else np.zeros((n, m))
        q0 = _as_matrix("Q0", data["Q0"]) if "Q0" in data else np.zeros((n, n))
        plant = cls(a, b, c, _as_matrix("Rv_c", data["Rv_c"]), _as_matrix("Rw", data["Rw"]),
                    sigma0, _as_matrix("Qxx", data["Qxx"]), qxu,
                    _as_matrix("Quu", data["Quu"]), q0)
        return plant.validate()


def second_order_plant(alpha: float, zeta: float, omega0: float, *,
                       rv_c=(0.5, 0.5), rw: float = 1e-4,
                       q_xx=(2.0, 1.0), q_uu: float = 1.0,
                       sigma0: Optional[np.ndarray] = None) -> ContinuousPlant:
    """Second-order benchmark plant with position measurement.

    ``dx = [[0, 1], [-w0^2, -2 a z w0]] x dt + [0, w0^2]^T u dt + dv``.
    """
    a = np.array([[0.0, 1.0], [-omega0 ** 2, -2.0 * alpha * zeta * omega0]])
    b = np.array([[0.0], [omega0 ** 2]])
    c = np.array([[1.0, 0.0]])
    return ContinuousPlant(
        a, b, c, np.diag(rv_c).astype(float), np.array([[rw]]),
        np.zeros((2, 2)) if sigma0 is None else np.asarray(sigma0, dtype=float),
        np.diag(q_xx).astype(float), np.zeros((2, 1)), np.array([[q_uu]]),
        np.zeros((2, 2)),
    ).validate()


@dataclass(frozen=True)
class Link:
    src: int
    dst: int
    p_loss: float


@dataclass(frozen=True)
class NetworkTopology:
    """Directed lossy network; nodes are ``1..node_count`` and the destination is ``node_count``."""

    node_count: int
    links: tuple
    slot_ms: float
    source: int = 1

    @property
    def destination(self) -> int:
        return self.node_count

    def out_links(self, node: int) -> list:
        """Outgoing ``(neighbor, p_loss)`` pairs of ``node`` sorted by neighbor id."""
        return sorted((l.dst, l.p_loss) for l in self.links if l.src == node)

    def out_neighbors(self) -> dict:
        """``out_links`` for every node, built in one pass over the links."""
        adj = {i: [] for i in range(1, self.node_count + 1)}
        for l in self.links:
            adj[l.src].append((l.dst, l.p_loss))
        return {i: sorted(pairs) for i, pairs in adj.items()}

    def in_neighbors(self, node: int) -> list:
        return sorted(l.src for l in self.links if l.dst == node)

    def loss(self, src: int, dst: int) -> float:
        for l in self.links:
            if l.src == src and l.dst == dst:
                return l.p_loss
        raise KeyError((src, dst))

    def can_reach_destination(self, node: int) -> bool:
        z = self.destination
        seen, stack = {node}, [node]
        while stack:
            i = stack.pop()
            if i == z:
                return True
            for j, _ in self.out_links(i):
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return False

    @property
    def degenerate(self) -> bool:
        """True when the source is the destination or cannot reach it."""
        return self.source == self.destination or not self.can_reach_destination(self.source)

    def with_uniform_loss(self, p_loss: float) -> "NetworkTopology":
        links = tuple(Link(l.src, l.dst, float(p_loss)) for l in self.links)
        return NetworkTopology(self.node_count, links, self.slot_ms, self.source).validate()

    def validate(self) -> "NetworkTopology":
        if not isinstance(self.node_count, int) or self.node_count < 1:
            raise ValidationError("nodes", "must be an integer >= 1")
        if not (isinstance(self.slot_ms, (int, float)) and self.slot_ms > 0
                and math.isfinite(self.slot_ms)):
            raise ValidationError("slot_ms", "must be a positive number")
        if not 1 <= self.source <= self.node_count:
            raise ValidationError("source", f"must be in 1..{self.node_count}")
        seen = set()
        for k, l in enumerate(self.links):
            where = f"links[{k}]"
            for end in (l.src, l.dst):
                if not 1 <= end <= self.node_count:
                    raise ValidationError(where, f"node {end} outside 1..{self.node_count}")
            if l.src == l.dst:
                raise ValidationError(where, "self-loops are not allowed")
            if (l.src, l.dst) in seen:
                raise ValidationError(where, f"duplicate link {l.src}->{l.dst}")
            seen.add((l.src, l.dst))
            if not (0.0 <= l.p_loss < 1.0):
                raise ValidationError(where, "p_loss must lie in [0, 1); omit unusable links")
        return self

    def to_dict(self) -> dict:
        return {
            "nodes": self.node_count,
            "slot_ms": self.slot_ms,
            "source": self.source,
            "links": [{"from": l.src, "to": l.dst, "p_loss": l.p_loss} for l in self.links],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkTopology":
        if not isinstance(data, dict):
            raise ParseError("topology document must be a JSON object")
        try:
            links = tuple(Link(int(d["from"]), int(d["to"]), float(d["p_loss"]))
                          for d in data.get("links", []))
            nodes = data["nodes"]
            slot = data["slot_ms"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed topology document: {exc!r}") from None
        if isinstance(nodes, bool) or not isinstance(nodes, int):
            raise ValidationError("nodes", "must be an integer >= 1")
        if isinstance(slot, bool) or not isinstance(slot, (int, float)):
            raise ValidationError("slot_ms", "must be a positive number")
        source = data.get("source", 1)
        return cls(nodes, links, float(slot), int(source)).validate()


@dataclass(frozen=True)
class DesignConfig:
    """Design-space description.  Times are milliseconds except ``horizon_s``."""

    horizon_s: float = math.inf
    epsilon: Optional[float] = None
    h_grid: tuple = ()
    tau_grid: Optional[tuple] = None
    source_node: Optional[int] = None
    mc_replicates: int = 10000
    rng_seed: int = 0

    @property
    def tau_mode(self) -> str:
        return "equal-h" if self.tau_grid is None else "grid"

    def grid(self) -> list:
        """All admissible ``(h_ms, tau_ms)`` pairs in ascending order."""
        if self.tau_grid is None:
            return [(h, h) for h in sorted(self.h_grid)]
        return [(h, tau) for h in sorted(self.h_grid) for tau in sorted(self.tau_grid)
                if tau <= h]

    def validate(self, slot_ms: Optional[float] = None) -> "DesignConfig":
        if not (self.horizon_s > 0):
            raise ValidationError("horizon_s", "must be positive or 'inf'")
        if self.epsilon is not None and not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ValidationError("epsilon_per_ms", "must be a nonnegative number or null")
        if not self.h_grid:
            raise ValidationError("h_grid_ms", "must not be empty")
        if any(not (h > 0) for h in self.h_grid):
            raise ValidationError("h_grid_ms", "entries must be positive")
        if slot_ms is not None and any(h < slot_ms for h in self.h_grid):
            raise ValidationError("h_grid_ms", f"entries must be >= slot_ms ({slot_ms})")
        if self.tau_grid is not None:
            if any(not (t > 0) for t in self.tau_grid):
                raise ValidationError("tau_grid_ms", "entries must be positive")
            if not self.grid():
                raise ValidationError("tau_grid_ms", "no tau is <= any h")
        if self.mc_replicates < 1:
            raise ValidationError("mc_replicates", "must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {
            "horizon_s": "inf" if math.isinf(self.horizon_s) else self.horizon_s,
            "epsilon_per_ms": self.epsilon,
            "h_grid_ms": list(self.h_grid),
            "tau_mode": "equal-h" if self.tau_grid is None else {"tau_grid_ms": list(self.tau_grid)},
            "mc_replicates": self.mc_replicates,
            "seed": self.rng_seed,
            **({} if self.source_node is None else {"source": self.source_node}),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DesignConfig":
        if not isinstance(data, dict):
            raise ParseError("design document must be a JSON object")
        try:
            horizon = data.get("horizon_s", "inf")
            horizon = math.inf if horizon == "inf" else float(horizon)
            eps = data.get("epsilon_per_ms")
            eps = None if eps is None else float(eps)
            h_grid = tuple(float(h) for h in data["h_grid_ms"])
            mode = data.get("tau_mode", "equal-h")
            if mode == "equal-h":
                tau_grid = None
            elif isinstance(mode, dict) and "tau_grid_ms" in mode:
                tau_grid = tuple(float(t) for t in mode["tau_grid_ms"])
            else:
                raise ParseError(f"unknown tau_mode {mode!r}")
            source = data.get("source")
            cfg = cls(horizon, eps, h_grid, tau_grid,
                      None if source is None else int(source),
                      int(data.get("mc_replicates", 10000)), int(data.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed design document: {exc!r}") from None
        return cfg.validate()


def default_h_grid(slot_ms: float, count: int = 50) -> tuple:
    """``t_s, 2 t_s, ..., count * t_s``."""
    return tuple(float(slot_ms * k) for k in range(1, count + 1))


def _read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None


def load_plant(path) -> ContinuousPlant:
    return ContinuousPlant.from_dict(_read_json(path))


def load_topology(path) -> NetworkTopology:
    return NetworkTopology.from_dict(_read_json(path))


def load_design(path, slot_ms: Optional[float] = None) -> DesignConfig:
    return DesignConfig.from_dict(_read_json(path)).validate(slot_ms)


def dump_json(obj, path) -> None:
    """Write ``obj.to_dict()`` (or a plain dict) as UTF-8 JSON."""
    data = obj.to_dict() if hasattr(obj, "to_dict") else obj
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def make_topology(node_count: int, links: Sequence, slot_ms: float = 10.0,
                  source: int = 1) -> NetworkTopology:
    """Build a validated topology from ``(from, to, p_loss)`` triples."""
    return NetworkTopology(node_count, tuple(Link(int(a), int(b), float(p)) for a, b, p in links),
                           float(slot_ms), source).validate()
