"""User profiles and ground-truth traces.

Two source models are supported:

* i.i.d.: user ``u`` emits symbols from a fixed pmf over ``r`` symbols;
* Markov: user ``u`` follows a row-stochastic transition matrix supported on a
  shared edge set (topology).

Profiles are drawn independently per user from a bounded density on the open
parameter range. Traces are stored as ``m x n`` matrices: column ``u`` is the
time series of user ``u`` (0-based, so "user 1" is column 0).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ._random import STREAM_PROFILES, STREAM_TRACES, derive_rng

INTERIOR_MARGIN = 1e-9
STAGES = ("X", "Z", "Y", "Z-real", "Y-real")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DensityConfig:
    """Bounded density on the open parameter range.

    ``uniform-on-support`` is the default. ``truncated-custom`` takes an
    (unnormalized) ``pdf`` over the free coordinates which must stay within
    ``[delta_lo, delta_hi]``; it is sampled by rejection against ``delta_hi``.
    """

    delta_lo: float = 1.0
    delta_hi: float = 1.0
    kind: str = "uniform-on-support"
    pdf: Callable[[np.ndarray], float] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not (self.delta_lo > 0 and self.delta_hi > 0):
            raise ValueError("density bounds must be positive")
        if self.delta_lo > self.delta_hi:
            raise ValueError(f"delta_lo={self.delta_lo} exceeds delta_hi={self.delta_hi}")
        if self.kind not in ("uniform-on-support", "truncated-custom"):
            raise ValueError(f"unknown density kind {self.kind!r}")
        if self.kind == "truncated-custom" and self.pdf is None:
            raise ValueError("truncated-custom density needs a pdf")

    def check_normalizable(self, support_volume: float) -> None:
        if self.delta_lo * support_volume > 1.0 + 1e-12:
            raise ValueError(
                f"density lower bound {self.delta_lo} times support volume {support_volume:.6g} "
                "exceeds 1; no such density exists"
            )


@dataclass(frozen=True)
class IidProfile:
    pmf: np.ndarray

    def __post_init__(self):
        pmf = np.asarray(self.pmf, dtype=float)
        if pmf.ndim != 1 or pmf.size < 2:
            raise ValueError("pmf needs at least 2 symbols")
        if np.any(pmf <= 0) or abs(pmf.sum() - 1.0) > 1e-12:
            raise ValueError("pmf entries must be positive and sum to 1")
        object.__setattr__(self, "pmf", pmf)

    @property
    def r(self) -> int:
        return self.pmf.size

    @property
    def p(self) -> float:
        """P(symbol 1); the parameter of the two-state model."""
        return float(self.pmf[1])


@dataclass(frozen=True)
class Topology:
    """Edge set of a Markov chain over ``r`` states."""

    r: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        edges = tuple(sorted({(int(i), int(l)) for i, l in self.edges}))
        if self.r < 2:
            raise ValueError("a chain needs at least 2 states")
        for i, l in edges:
            if not (0 <= i < self.r and 0 <= l < self.r):
                raise ValueError(f"edge {(i, l)} outside state range 0..{self.r - 1}")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_edges(cls, edges: Iterable[Sequence[int]], r: int | None = None) -> "Topology":
        edges = [tuple(e) for e in edges]
        if r is None:
            r = 1 + max(max(e) for e in edges)
        return cls(r, tuple(edges))

    @classmethod
    def complete(cls, r: int, self_loops: bool = True) -> "Topology":
        return cls(r, tuple((i, l) for i in range(r) for l in range(r) if self_loops or i != l))

    @property
    def out_edges(self) -> list[list[int]]:
        out = [[] for _ in range(self.r)]
        for i, l in self.edges:
            out[i].append(l)
        return out

    @property
    def free_edges(self) -> list[tuple[int, int]]:
        """Edges whose probabilities determine the chain: all but the last edge of each row."""
        return [(i, l) for i, targets in enumerate(self.out_edges) for l in targets[:-1]]

    @property
    def free_dim(self) -> int:
        return len(self.edges) - self.r

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.r, self.r), dtype=bool)
        for i, l in self.edges:
            a[i, l] = True
        return a

    def is_irreducible(self) -> bool:
        a = self.adjacency()
        return bool(_reach(a, 0).all() and _reach(a.T, 0).all())

    def period(self) -> int:
        """Period of the chain: gcd of cycle lengths, via BFS levels from state 0."""
        a = self.adjacency()
        level = np.full(self.r, -1)
        level[0] = 0
        frontier = [0]
        while frontier:
            nxt = []
            for i in frontier:
                for l in np.flatnonzero(a[i]):
                    if level[l] < 0:
                        level[l] = level[i] + 1
                        nxt.append(int(l))
            frontier = nxt
        g = 0
        for i, l in self.edges:
            if level[i] >= 0 and level[l] >= 0:
                g = math.gcd(g, int(level[i] + 1 - level[l]))
        return g

    def validate(self) -> None:
        rows = self.out_edges
        empty = [i for i, t in enumerate(rows) if not t]
        if empty:
            raise ValueError(f"states {empty} have no outgoing edge; rows cannot sum to 1")
        if not self.is_irreducible():
            raise ValueError("topology is reducible")
        if self.period() != 1:
            raise ValueError(f"topology is periodic (period {self.period()})")
        if self.free_dim < 1:
            raise ValueError("topology has no free transition probabilities (|E| - r < 1)")

    def support_volume(self) -> float:
        return float(np.prod([1.0 / math.factorial(len(t) - 1) for t in self.out_edges]))


def _reach(adj: np.ndarray, start: int) -> np.ndarray:
    seen = np.zeros(adj.shape[0], dtype=bool)
    seen[start] = True
    stack = [start]
    while stack:
        i = stack.pop()
        for l in np.flatnonzero(adj[i] & ~seen):
            seen[l] = True
            stack.append(int(l))
    return seen


# The two-state chain 0 -> 1 (prob 1), 1 -> 0 (prob p), 1 -> 1 (prob 1 - p).
TWO_STATE_TOPOLOGY = Topology(2, ((0, 1), (1, 0), (1, 1)))
# Three states, every transition except self-loops: |E| = 6, d = 3.
THREE_STATE_TOPOLOGY = Topology.complete(3, self_loops=False)


@dataclass(frozen=True)
class MarkovProfile:
    topology: Topology
    transitions: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.transitions, dtype=float)
        r = self.topology.r
        if t.shape != (r, r):
            raise ValueError(f"transition matrix must be {r}x{r}")
        if np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("rows must sum to 1")
        mask = self.topology.adjacency()
        if np.any(t[~mask] != 0) or np.any(t[mask] <= 0):
            raise ValueError("transition matrix must be supported exactly on the edge set")
        object.__setattr__(self, "transitions", t)

    @property
    def states(self) -> int:
        return self.topology.r

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return self.topology.edges

    @property
    def free_dim(self) -> int:
        return self.topology.free_dim

    def free_coordinates(self) -> np.ndarray:
        return np.array([self.transitions[i, l] for i, l in self.topology.free_edges])


@dataclass
class UserPopulation:
    """``n`` independently drawn profiles of one kind.

    For the i.i.d. kind ``params`` is an ``(n, r)`` array of pmfs; for the
    Markov kind it is an ``(n, r, r)`` array of transition matrices on
    ``topology``.
    """

    kind: str
    params: np.ndarray
    density: DensityConfig = field(default_factory=DensityConfig)
    seed: int | None = None
    topology: Topology | None = None

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.kind == "iid":
            if self.params.ndim != 2 or self.params.shape[1] < 2:
                raise ValueError("i.i.d. params must be an (n, r) array with r >= 2")
        elif self.kind == "markov":
            if self.topology is None:
                raise ValueError("Markov population needs a topology")
            r = self.topology.r
            if self.params.ndim != 3 or self.params.shape[1:] != (r, r):
                raise ValueError(f"Markov params must be an (n, {r}, {r}) array")
        else:
            raise ValueError(f"unknown population kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.params.shape[0]

    @property
    def r(self) -> int:
        return self.params.shape[1]

    @property
    def p(self) -> np.ndarray:
        """Two-state shortcut: P(symbol 1) per user."""
        if self.kind != "iid":
            raise AttributeError("p is defined for i.i.d. populations only")
        return self.params[:, 1]

    @property
    def profiles(self) -> list[IidProfile] | list[MarkovProfile]:
        if self.kind == "iid":
            return [IidProfile(row) for row in self.params]
        return [MarkovProfile(self.topology, mat) for mat in self.params]

    def free_coordinates(self) -> np.ndarray:
        """``(n, r-1)`` pmf coordinates 1..r-1, or ``(n, d)`` free transition probabilities."""
        if self.kind == "iid":
            return self.params[:, 1:]
        idx = np.array(self.topology.free_edges)
        return self.params[:, idx[:, 0], idx[:, 1]]

    @classmethod
    def from_probabilities(cls, p: Sequence[float], **kw) -> "UserPopulation":
        """Two-state population from P(symbol 1) values (handy for fixed fixtures)."""
        p = np.asarray(p, dtype=float)
        return cls("iid", np.column_stack([1.0 - p, p]), **kw)

    @classmethod
    def from_matrices(cls, topology: Topology, matrices: Sequence[np.ndarray], **kw) -> "UserPopulation":
        return cls("markov", np.asarray(matrices, dtype=float), topology=topology, **kw)


@dataclass
class TraceMatrix:
    values: np.ndarray
    stage: str = "X"
    r: int | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError("trace values must be an m x n matrix")
        if self.stage.endswith("-real"):
            v = v.astype(float, copy=False)
        else:
            if not np.issubdtype(v.dtype, np.integer):
                if not np.all(np.mod(v, 1) == 0):
                    raise ValueError(f"stage {self.stage} holds symbols; got non-integer values")
                v = v.astype(np.int16)
            if self.r is None:
                self.r = max(2, int(v.max()) + 1) if v.size else 2
            if v.size and (v.min() < 0 or v.max() >= self.r):
                raise ValueError(f"symbols must lie in 0..{self.r - 1}")
        self.values = v

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def column(self, u: int) -> np.ndarray:
        return self.values[:, u]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _uniform_simplex(rng: np.random.Generator, size: int, k: int) -> np.ndarray:
    """Uniform points on the open (k-1)-simplex via normalized exponential spacings."""
    e = rng.standard_exponential((size, k))
    return e / e.sum(axis=1, keepdims=True)


def _interior_simplex(rng, size, k, density, coords=None):
    """Draw ``size`` points on the open simplex with every coordinate >= margin.

    Rejection handles both the interiority margin and custom densities.
    """
    out = np.empty((size, k))
    filled = 0
    while filled < size:
        need = size - filled
        batch = _uniform_simplex(rng, max(need * 2, 16), k)
        ok = np.all(batch > INTERIOR_MARGIN, axis=1)
        if density.kind == "truncated-custom":
            vals = np.array([density.pdf(row if coords is None else coords(row)) for row in batch])
            if np.any(vals > density.delta_hi * (1 + 1e-12)) or np.any(vals[ok] < density.delta_lo * (1 - 1e-12)):
                raise ValueError("custom pdf leaves the configured [delta_lo, delta_hi] band")
            ok &= rng.random(batch.shape[0]) * density.delta_hi < vals
        take = batch[ok][:need]
        out[filled : filled + take.shape[0]] = take
        filled += take.shape[0]
    return out


def sample_iid_profiles(n: int, r: int, density: DensityConfig | None = None, seed: int | None = None) -> UserPopulation:
    """Draw ``n`` i.i.d. profiles over ``r`` symbols.

    The default density is uniform on the open simplex, i.e. on the range
    ``{x in (0,1)^(r-1): sum(x) < 1}`` of the free coordinates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if r < 2:
        raise ValueError("r must be >= 2")
    density = density or DensityConfig()
    density.check_normalizable(1.0 / math.factorial(r - 1))
    rng = derive_rng(seed, STREAM_PROFILES)
    # Symbol 0 carries the dependent mass; the density is over symbols 1..r-1.
    pmf = _interior_simplex(rng, n, r, density, coords=lambda row: row[1:])
    return UserPopulation("iid", pmf, density=density, seed=seed)


def sample_markov_profiles(
    n: int, topology: Topology, density: DensityConfig | None = None, seed: int | None = None
) -> UserPopulation:
    """Draw ``n`` transition matrices on ``topology``.

    Each row's out-edge probabilities are drawn independently and uniformly on
    that row's open simplex (a bounded density on the product of row simplices).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    topology.validate()
    density = density or DensityConfig()
    density.check_normalizable(topology.support_volume())
    rng = derive_rng(seed, STREAM_PROFILES)
    r = topology.r
    mats = np.zeros((n, r, r))
    if density.kind == "uniform-on-support":
        for i, targets in enumerate(topology.out_edges):
            if len(targets) == 1:
                mats[:, i, targets[0]] = 1.0
            else:
                mats[:, i, targets] = _interior_simplex(rng, n, len(targets), density)
    else:
        free = topology.free_edges
        for u in range(n):
            while True:
                m = np.zeros((r, r))
                for i, targets in enumerate(topology.out_edges):
                    m[i, targets] = _interior_simplex(rng, 1, len(targets), DensityConfig())[0] if len(targets) > 1 else 1.0
                val = density.pdf(np.array([m[i, l] for i, l in free]))
                if val > density.delta_hi * (1 + 1e-12) or val < density.delta_lo * (1 - 1e-12):
                    raise ValueError("custom pdf leaves the configured [delta_lo, delta_hi] band")
                if rng.random() * density.delta_hi < val:
                    mats[u] = m
                    break
    return UserPopulation("markov", mats, density=density, seed=seed, topology=topology)


def stationary_distribution(profile: MarkovProfile | np.ndarray) -> np.ndarray:
    """Solve ``pi P = pi`` with ``sum(pi) = 1`` for an irreducible chain."""
    p = profile.transitions if isinstance(profile, MarkovProfile) else np.asarray(profile, dtype=float)
    r = p.shape[0]
    a = np.vstack([p.T - np.eye(r), np.ones((1, r))])
    b = np.zeros(r + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    if np.abs(pi @ p - pi).max() > 1e-10 or np.any(pi <= 0):
        raise ArithmeticError("stationary solve did not converge; is the chain irreducible?")
    return pi / pi.sum()


def _stationary_batch(mats: np.ndarray) -> np.ndarray:
    n, r, _ = mats.shape
    a = np.concatenate([np.transpose(mats, (0, 2, 1)) - np.eye(r), np.ones((n, 1, r))], axis=1)
    b = np.zeros((n, r + 1))
    b[:, -1] = 1.0
    # Normal equations are fine here: r is tiny and the system is well conditioned.
    at = np.transpose(a, (0, 2, 1))
    pi = np.linalg.solve(at @ a, (at @ b[..., None]))[..., 0]
    return pi / pi.sum(axis=1, keepdims=True)


def generate_traces(
    pop: UserPopulation, m: int, seed: int | None = None, start: str | int = "stationary"
) -> TraceMatrix:
    """Sample the ground-truth matrix ``X`` (stage ``X``).

    Column ``u`` uses its own random stream, so a user's trace does not depend
    on ``n``. Markov chains start from the stationary distribution unless
    ``start`` names a fixed initial state.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    n, r = pop.n, pop.r
    dtype = np.int8 if r <= 127 else np.int16
    # One uniform per sample (plus one for the start state), drawn per user.
    u = np.empty((m + 1, n))
    for j in range(n):
        u[:, j] = derive_rng(seed, STREAM_TRACES, j).random(m + 1)
    if pop.kind == "iid":
        cdf = np.cumsum(pop.params, axis=1)
        cdf[:, -1] = np.inf
        x = np.empty((m, n), dtype=dtype)
        for j in range(n):
            x[:, j] = np.searchsorted(cdf[j], u[1:, j], side="right")
        return TraceMatrix(x, "X", r)

    mats = pop.params
    cum = np.cumsum(mats, axis=2)
    cum[:, :, -1] = np.inf
    if start == "stationary":
        pis = np.cumsum(_stationary_batch(mats), axis=1)
        pis[:, -1] = np.inf
        state = (u[0][:, None] >= pis).sum(axis=1)
    else:
        state = np.full(n, int(start))
    x = np.empty((m, n), dtype=dtype)
    x[0] = state
    if m > 1:
        chunk = max(1, 4_000_000 // (m * r))
        for lo in range(0, n, chunk):
            cols = slice(lo, min(n, lo + chunk))
            x[1:, cols] = _chain_paths(cum[cols], state[cols], u[1:m, cols])
    return TraceMatrix(x, "X", r)


def _chain_paths(cum: np.ndarray, start: np.ndarray, u: np.ndarray) -> np.ndarray:
    """States after steps 1..K of chains driven by uniforms ``u`` (K x n).

    Step ``k`` is the map ``i -> #{l : u[k] >= cum[i, l]}``. Maps compose
    associatively, so the prefix compositions come from a log-depth scan
    instead of a loop over time.
    """
    K, n = u.shape
    # maps[k, j, i]: state after step k for chain j if it was in state i.
    maps = (u[:, :, None, None] >= cum[None, :, :, :]).sum(axis=3).astype(np.intp)
    s = 1
    while s < K:
        maps[s:] = np.take_along_axis(maps[s:], maps[:-s], axis=2)
        s *= 2
    return np.take_along_axis(maps, np.broadcast_to(start[None, :, None], (K, n, 1)), axis=2)[:, :, 0]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def write_traces_csv(traces: TraceMatrix, path: str | Path) -> None:
    """One row per user: the user (or pseudonym) index, then its ``m`` values."""
    path = Path(path)
    real = traces.stage.endswith("-real")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user"] + [f"t{k}" for k in range(traces.m)])
        for j in range(traces.n):
            col = traces.values[:, j]
            w.writerow([j] + ([repr(float(v)) for v in col] if real else [int(v) for v in col]))


def read_traces_csv(path: str | Path, stage: str = "X", r: int | None = None) -> TraceMatrix:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["user"]:
        raise ValueError(f"{path}: missing 'user' header row")
    body = rows[1:]
    order = [int(row[0]) for row in body]
    if sorted(order) != list(range(len(body))):
        raise ValueError(f"{path}: user indices must be 0..n-1")
    real = stage.endswith("-real")
    cols = {int(row[0]): [float(v) if real else int(v) for v in row[1:]] for row in body}
    values = np.array([cols[j] for j in range(len(body))]).T
    return TraceMatrix(values, stage, r)


def save_traces_npz(traces: TraceMatrix, path: str | Path) -> None:
    np.savez_compressed(path, values=traces.values, stage=traces.stage, r=-1 if traces.r is None else traces.r)


def load_traces_npz(path: str | Path) -> TraceMatrix:
    with np.load(path) as f:
        r = int(f["r"])
        return TraceMatrix(f["values"], str(f["stage"]), None if r < 0 else r)


def population_to_record(pop: UserPopulation) -> dict:
    rec = {
        "kind": pop.kind,
        "n": pop.n,
        "r": pop.r,
        "seed": pop.seed,
        "density": {"delta_lo": pop.density.delta_lo, "delta_hi": pop.density.delta_hi, "kind": pop.density.kind},
    }
    if pop.kind == "iid":
        rec["profiles"] = [{"user": u, "pmf": row.tolist()} for u, row in enumerate(pop.params)]
    else:
        rec["edges"] = [list(e) for e in pop.topology.edges]
        rec["profiles"] = [{"user": u, "transitions": mat.tolist()} for u, mat in enumerate(pop.params)]
    return rec


def population_from_record(rec: dict) -> UserPopulation:
    d = rec.get("density", {})
    density = DensityConfig(d.get("delta_lo", 1.0), d.get("delta_hi", 1.0), d.get("kind", "uniform-on-support"))
    if d.get("kind") == "truncated-custom":
        # The pdf itself is not serializable; keep the bounds only.
        density = DensityConfig(density.delta_lo, density.delta_hi)
    profiles = sorted(rec["profiles"], key=lambda p: p["user"])
    if rec["kind"] == "iid":
        return UserPopulation("iid", [p["pmf"] for p in profiles], density=density, seed=rec.get("seed"))
    topo = Topology(int(rec["r"]), tuple(tuple(e) for e in rec["edges"]))
    return UserPopulation(
        "markov", [p["transitions"] for p in profiles], density=density, seed=rec.get("seed"), topology=topo
    )


def save_population(pop: UserPopulation, path: str | Path) -> None:
    # json writes floats with repr(), which round-trips exactly.
    Path(path).write_text(json.dumps(population_to_record(pop), indent=1))


def load_population(path: str | Path) -> UserPopulation:
    return population_from_record(json.loads(Path(path).read_text()))
