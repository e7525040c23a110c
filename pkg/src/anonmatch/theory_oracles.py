"""Brute-force oracles for the lemmas behind the privacy results.

These do not touch the attack pipeline: each builds a small, fully explicit
problem and evaluates the quantity of interest directly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._random import STREAM_ORACLE, derive_rng
from .mechanisms import NoiseSchedule
from .privacy_metrics import critical_set_mask, epsilon_n
from .source_models import DensityConfig, _interior_simplex

UNIFORM_TOL = 1e-12


# ---------------------------------------------------------------------------
# Posterior over assignments when observed values share a common overlap
# ---------------------------------------------------------------------------


@dataclass
class OverlapInstance:
    """``N`` independent uniforms ``X_u ~ U[a_u, b_u]`` observed as an unordered set."""

    intervals: list[tuple[float, float]]
    observed: list[float]

    def __post_init__(self):
        self.intervals = [(float(a), float(b)) for a, b in self.intervals]
        self.observed = [float(g) for g in self.observed]
        if len(self.intervals) != len(self.observed):
            raise ValueError("need one observed value per interval")
        if any(a > b for a, b in self.intervals):
            raise ValueError("intervals must satisfy a <= b")
        if len(set(self.observed)) != len(self.observed):
            raise ValueError("observed values must be distinct")

    @property
    def N(self) -> int:
        return len(self.intervals)

    def in_overlap(self) -> bool:
        lo = max(a for a, _ in self.intervals)
        hi = min(b for _, b in self.intervals)
        return all(lo <= g <= hi for g in self.observed)

    def density(self, u: int, x: float) -> float:
        a, b = self.intervals[u]
        if not a <= x <= b:
            return 0.0
        return 1.0 / (b - a) if b > a else 1.0


@dataclass(frozen=True)
class OverlapPosterior:
    value: float
    uniform: bool
    valid: bool


def uniform_overlap_posterior(inst: OverlapInstance, j: int) -> OverlapPosterior:
    """P(X_0 = observed[j] | the set of values) by summing over all assignments.

    When every observed value lies in every interval, all assignments have the
    same density and the answer is exactly ``1/N``; ``uniform`` reports
    whether the computed value matches that to 1e-12.
    """
    n = inst.N
    if not 0 <= j < n:
        raise IndexError(j)
    f = np.array([[inst.density(u, g) for g in inst.observed] for u in range(n)])
    hit = total = 0.0
    for perm in itertools.permutations(range(n)):
        w = math.prod(f[u, perm[u]] for u in range(n))
        total += w
        if perm[0] == j:
            hit += w
    if total == 0:
        raise ValueError("no assignment of observed values is feasible")
    value = hit / total
    valid = inst.in_overlap()
    return OverlapPosterior(value, valid and abs(value - 1.0 / n) <= UNIFORM_TOL, valid)


@dataclass(frozen=True)
class MonteCarloPosterior:
    value: float
    std_error: float
    accepted: int
    radius: float


def overlap_posterior_mc(inst: OverlapInstance, j: int, samples: int = 1_000_000, seed: int | None = None) -> MonteCarloPosterior:
    """Rejection-sampling estimate of the same posterior.

    Draws the ``X_u`` independently and keeps draws that land, one per box, in
    small boxes around the observed values. The box radius is below half the
    smallest gap and below the distance to any interval endpoint, so each box
    lies entirely inside or outside every interval and the estimate is
    unbiased for the point posterior.
    """
    g = np.array(inst.observed)
    ends = np.array(inst.intervals).ravel()
    gaps = np.diff(np.sort(g))
    cands = [np.min(np.abs(g[:, None] - ends[None, :]))]
    if gaps.size:
        cands.append(gaps.min() / 2.0)
    h = 0.999 * min(cands)
    if not h > 0:
        raise ValueError("an observed value sits on an interval endpoint")
    rng = derive_rng(seed, STREAM_ORACLE)
    lo = np.array([a for a, _ in inst.intervals])
    width = np.array([b - a for a, b in inst.intervals])
    n = inst.N
    acc = hit = 0
    chunk = 200_000
    done = 0
    while done < samples:
        size = min(chunk, samples - done)
        x = lo + rng.random((size, n)) * width
        near = np.abs(x[:, :, None] - g[None, None, :]) <= h
        inside = near.any(axis=2)
        box = near.argmax(axis=2)
        ok = inside.all(axis=1) & (np.sort(box, axis=1) == np.arange(n)).all(axis=1)
        acc += int(ok.sum())
        hit += int((ok & (box[:, 0] == j)).sum())
        done += size
    if acc == 0:
        return MonteCarloPosterior(float("nan"), float("inf"), 0, h)
    v = hit / acc
    return MonteCarloPosterior(v, math.sqrt(max(v * (1 - v), 1.0 / acc) / acc), acc, h)


def random_overlap_instance(N: int, seed: int | None = None, valid: bool = True) -> OverlapInstance:
    """Intervals that hug a shared overlap, with observed values spread inside it.

    Tight intervals keep the rejection oracle's acceptance rate usable.
    """
    rng = derive_rng(seed, STREAM_ORACLE, N)
    lo = rng.uniform(0.0, 0.5)
    hi = lo + rng.uniform(0.2, 0.5)
    pad = rng.uniform(0.0, 0.05, (N, 2))
    intervals = [(lo - pad[u, 0], hi + pad[u, 1]) for u in range(N)]
    edges = np.linspace(lo, hi, N + 1)
    mid = (edges[:-1] + edges[1:]) / 2
    obs = mid + rng.uniform(-0.2, 0.2, N) * (hi - lo) / N
    if not valid:
        a, b = intervals[0]
        intervals[0] = (a, (mid[0] + mid[1]) / 2)
    return OverlapInstance(intervals, obs.tolist())


# ---------------------------------------------------------------------------
# Averages of nearly identical Bernoullis
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceRow:
    N: int
    zeta: float
    mean: float
    abs_mean_error: float
    variance: float
    variance_bound: float
    within_bound: bool
    within_tolerance: float | None


@dataclass
class ConvergenceReport:
    p_center: float
    trials: int
    rows: list[ConvergenceRow] = field(default_factory=list)

    @property
    def max_abs_mean_error(self) -> float:
        return max(r.abs_mean_error for r in self.rows)

    def to_record(self) -> dict:
        return {"p_center": self.p_center, "trials": self.trials, "rows": [asdict(r) for r in self.rows]}


def bernoulli_average_convergence(
    p_center: float,
    zeta_fn: Callable[[int], float] | float,
    N_list: Sequence[int],
    trials: int = 2000,
    seed: int | None = None,
    tolerance: float | None = None,
) -> ConvergenceReport:
    """Distribution of the average of ``N`` Bernoullis whose means lie within ``zeta_N`` of ``p_center``.

    The empirical variance is compared with ``(p + zeta)(1 - p + zeta) / N``,
    allowing three standard errors of a sample variance.
    """
    if not 0 <= p_center <= 1:
        raise ValueError("p_center must lie in [0, 1]")
    report = ConvergenceReport(p_center, trials)
    for N in N_list:
        zeta = float(zeta_fn(N) if callable(zeta_fn) else zeta_fn)
        rng = derive_rng(seed, STREAM_ORACLE, N)
        lo, hi = max(0.0, p_center - zeta), min(1.0, p_center + zeta)
        ybar = np.empty(trials)
        step = max(1, 4_000_000 // N)
        for s in range(0, trials, step):
            t = min(step, trials - s)
            pu = rng.uniform(lo, hi, (t, N))
            ybar[s : s + t] = (rng.random((t, N)) < pu).mean(axis=1)
        var = float(ybar.var(ddof=1)) if trials > 1 else 0.0
        bound = (p_center + zeta) * (1 - p_center + zeta) / N
        slack = 1.0 + 3.0 * math.sqrt(2.0 / max(trials - 1, 1))
        within = None if tolerance is None else float(np.mean(np.abs(ybar - p_center) <= tolerance))
        report.rows.append(
            ConvergenceRow(N, zeta, float(ybar.mean()), abs(float(ybar.mean()) - p_center), var, bound, var <= bound * slack, within)
        )
    return report


# ---------------------------------------------------------------------------
# Conditioning on high-probability events
# ---------------------------------------------------------------------------


def mutual_information(joint: np.ndarray) -> float:
    """Exact MI in bits of a finite joint ``P[x, y]`` (need not be normalized)."""
    p = np.asarray(joint, dtype=float)
    total = p.sum()
    if not total > 0:
        raise ValueError("joint has zero mass")
    p = p / total
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / (px @ py)[nz])))


@dataclass
class GapReport:
    mi: float
    event_probability: list[float]
    conditional_mi: list[float]
    gap: list[float]

    @property
    def shrinking(self) -> bool:
        return all(b <= a for a, b in zip(self.gap, self.gap[1:]))

    def to_record(self) -> dict:
        return asdict(self)


def conditional_mi_gap(joint: np.ndarray, events: Sequence[np.ndarray]) -> GapReport:
    """Compare ``I(X; Y)`` with ``I(X; Y | B)`` for each event ``B``.

    Events are boolean masks over the cells of ``joint``.
    """
    joint = np.asarray(joint, dtype=float)
    joint = joint / joint.sum()
    mi = mutual_information(joint)
    probs, cond, gaps = [], [], []
    for ev in events:
        ev = np.broadcast_to(np.asarray(ev, dtype=bool), joint.shape)
        pb = float(joint[ev].sum())
        if pb <= 0:
            raise ValueError("conditioning event has zero probability")
        c = mutual_information(np.where(ev, joint, 0.0))
        probs.append(pb)
        cond.append(c)
        gaps.append(abs(mi - c))
    return GapReport(mi, probs, cond, gaps)


def nested_event_joint(n_list: Sequence[int], p: float = 0.5) -> tuple[np.ndarray, list[np.ndarray]]:
    """A joint of (X, Y) with nested events ``B_n`` of probability ``1 - 1/n``.

    ``Y = (level, bit)``. On the bulk level the bit is independent of ``X``;
    on each tail level it equals ``X``. ``B_n`` keeps the bulk and the tail
    levels of mass at least ``1/n``.
    """
    ns = sorted(int(n) for n in n_list)
    masses = [1 - 1 / ns[0]] + [1 / a - 1 / b for a, b in zip(ns, ns[1:])] + [1 / ns[-1]]
    L = len(masses)
    joint = np.zeros((2, 2 * L))
    px = np.array([1 - p, p])
    for lv, w in enumerate(masses):
        if lv == 0:
            joint[:, 0:2] = w * px[:, None] * np.array([[0.5, 0.5]])
        else:
            joint[0, 2 * lv] = w * px[0]
            joint[1, 2 * lv + 1] = w * px[1]
    events = []
    for i in range(len(ns)):
        keep = np.zeros(2 * L, dtype=bool)
        keep[: 2 * (i + 1)] = True
        events.append(np.broadcast_to(keep, joint.shape).copy())
    return joint, events


# ---------------------------------------------------------------------------
# Growth of the critical set
# ---------------------------------------------------------------------------


@dataclass
class GrowthReport:
    n_list: list[int]
    mean_size: list[float]
    slope: float
    intercept: float
    lambda_hat: float
    exceedance: list[float]
    nonempty: list[float]

    def to_record(self) -> dict:
        return asdict(self)


def critical_set_sizes(
    n: int,
    beta: float,
    trials: int,
    seed: int | None = None,
    density: DensityConfig | None = None,
    noise: NoiseSchedule | None = None,
    p1: float = 0.25,
) -> np.ndarray:
    """Sizes of the critical set over ``trials`` fresh two-state populations.

    User 0 has parameter ``p1``; the others are drawn from ``density`` and
    every user gets ``R_u ~ U[0, a_n]``.
    """
    noise = noise or NoiseSchedule(1.0, 1.0 - beta)
    a_n = noise.a(n)
    eps = epsilon_n(n, beta, 2)
    density = density or DensityConfig()
    out = np.empty(trials, dtype=np.int64)
    for t in range(trials):
        rng = derive_rng(seed, STREAM_ORACLE, n, t)
        if density.kind == "uniform-on-support":
            # Only users with P in the window next to p1 can be members, and
            # under the uniform density their number is binomial; drawing just
            # those users gives the same law for the set size.
            t1 = p1 if p1 < 0.5 else 1.0 - p1
            lo, hi = t1, min(1.0, t1 + eps)
            k = rng.binomial(n - 1, hi - lo)
            p = np.concatenate([[t1], rng.uniform(lo, hi, k)])
            target = t1
        else:
            p = _interior_simplex(rng, n, 2, density)[:, 1]
            p[0] = p1
            target = p1
        q = p + (1.0 - 2.0 * p) * rng.uniform(0.0, a_n, p.size)
        out[t] = int(critical_set_mask(p, q, target, eps, a_n).sum())
    return out


def lemma1_growth(
    n_list: Sequence[int],
    beta: float,
    density: DensityConfig | None = None,
    noise: NoiseSchedule | None = None,
    trials: int = 200,
    seed: int | None = None,
    p1: float = 0.25,
) -> GrowthReport:
    """Fit the growth exponent of the critical-set size.

    ``lambda_hat`` is ``E[N] / n**(beta/2)`` at the smallest ``n``; exceedance
    is the fraction of trials with ``N > (lambda_hat / 2) n**(beta/2)``.
    """
    ns = [int(n) for n in n_list]
    sizes = [critical_set_sizes(n, beta, trials, seed, density, noise, p1) for n in ns]
    means = np.array([s.mean() for s in sizes])
    if np.any(means <= 0):
        slope = intercept = float("nan")
    else:
        slope, intercept = np.polyfit(np.log(ns), np.log(means), 1)
    lam = float(means[0] / ns[0] ** (beta / 2))
    exceed = [float(np.mean(s > lam / 2 * n ** (beta / 2))) for s, n in zip(sizes, ns)]
    nonempty = [float(np.mean(s > 0)) for s in sizes]
    return GrowthReport(ns, means.tolist(), float(slope), float(intercept), lam, exceed, nonempty)
