"""Matching attacks against anonymized, obfuscated traces.

The adversary sees only the anonymized matrix ``Y``, the known user profiles
and the design noise cap ``a_n``. It never receives the permutation, the noise
realizations or stage-``Z`` data; none of the functions here accept them.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .mechanisms import observed_pair_law
from .source_models import TWO_STATE_TOPOLOGY, Topology, TraceMatrix, UserPopulation

CENTER_MODES = ("noise-range", "true")


class InconsistentMomentsError(ValueError):
    """The observed moments have no preimage in the parameter domain."""


def band_width(n: int, alpha: float, dim: int = 1) -> float:
    """Half-width ``n**-(1/dim + alpha/4)`` of the matching box.

    ``dim`` is 1 for two symbols, ``r - 1`` for r symbols and ``|E| - r`` for
    chains.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return float(n) ** (-(1.0 / dim + alpha / 4.0))


@dataclass
class AttackConfig:
    """Side information for one attack.

    ``center`` selects where the matching box sits: ``"true"`` centers it on
    the target's own parameters; ``"noise-range"`` (default) accepts any point
    within the box of the curve the target's observed law traces as its noise
    level sweeps ``[0, a_n]``.
    """

    alpha: float
    known_profiles: UserPopulation
    a_n: float
    target_user: int = 0
    center: str = "noise-range"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 <= self.target_user < self.known_profiles.n:
            raise ValueError(f"target_user {self.target_user} outside 0..{self.known_profiles.n - 1}")
        if not 0 <= self.a_n <= 1:
            raise ValueError("a_n must lie in [0, 1]")
        if self.center not in CENTER_MODES:
            raise ValueError(f"center must be one of {CENTER_MODES}")


@dataclass
class MatchReport:
    """Outcome of a matching attack.

    ``claimed_pseudonym`` is always set: the in-box candidate if unique, else
    the nearest pseudonym (among in-box candidates when there are several).
    ``band_claim`` is the strict decision and is ``None`` unless exactly one
    pseudonym fell in the box. ``success`` is left for the harness to fill.
    """

    claimed_pseudonym: int
    band_claim: int | None
    band_width: float
    candidates_in_band: int
    ambiguous: bool
    distance: float
    sample_estimates: np.ndarray = field(repr=False)
    success: bool | None = None

    def to_record(self, estimates_ref: str | None = None) -> dict:
        rec = asdict(self)
        rec.pop("sample_estimates")
        rec["m"] = int(self.sample_estimates.size)
        if estimates_ref is None:
            rec["sample_estimates"] = self.sample_estimates.tolist()
        else:
            rec["sample_estimates_ref"] = estimates_ref
        return rec


# ---------------------------------------------------------------------------
# i.i.d. sources
# ---------------------------------------------------------------------------


def empirical_frequencies(y: TraceMatrix, r: int | None = None) -> np.ndarray:
    """Per-pseudonym symbol frequencies.

    Returns shape ``(n,)`` (frequency of symbol 1) for two symbols and
    ``(n, r-1)`` (frequencies of symbols 1..r-1) otherwise.
    """
    r = r or y.r or 2
    v = y.values
    if v.shape[0] < 1:
        raise ValueError("need at least one observation")
    if r == 2:
        return (v == 1).mean(axis=0)
    return np.stack([(v == i).mean(axis=0) for i in range(1, r)], axis=1)


def _segment_match(freq: np.ndarray, start: np.ndarray, direction: np.ndarray, delta: float):
    """Box membership and distance of each row of ``freq`` w.r.t. a segment.

    The segment is ``start + t * direction`` for ``t`` in ``[0, 1]``. A row is
    in the box if some point on the segment is within ``delta`` of it in every
    coordinate.
    """
    n, dim = freq.shape
    lo = np.zeros(n)
    hi = np.ones(n)
    ok = np.ones(n, dtype=bool)
    diff = freq - start
    for i in range(dim):
        v = direction[i]
        if abs(v) < 1e-300:
            ok &= np.abs(diff[:, i]) <= delta
            continue
        a = (diff[:, i] - delta) / v
        b = (diff[:, i] + delta) / v
        lo = np.maximum(lo, np.minimum(a, b))
        hi = np.minimum(hi, np.maximum(a, b))
    in_band = ok & (lo <= hi)
    vv = float(direction @ direction)
    t = np.clip(diff @ direction / vv, 0.0, 1.0) if vv > 0 else np.zeros(n)
    dist = np.linalg.norm(diff - t[:, None] * direction, axis=1)
    return in_band, dist


def _decide(y: TraceMatrix, in_band: np.ndarray, dist: np.ndarray, delta: float) -> MatchReport:
    cand = np.flatnonzero(in_band)
    if cand.size == 1:
        claimed = int(cand[0])
    elif cand.size > 1:
        claimed = int(cand[np.argmin(dist[cand])])
    else:
        claimed = int(np.argmin(dist))
    return MatchReport(
        claimed_pseudonym=claimed,
        band_claim=claimed if cand.size == 1 else None,
        band_width=delta,
        candidates_in_band=int(cand.size),
        ambiguous=cand.size != 1,
        distance=float(dist[claimed]),
        sample_estimates=y.values[:, claimed].copy(),
    )


def match_iid(y: TraceMatrix, cfg: AttackConfig) -> MatchReport:
    """Claim the pseudonym whose empirical frequencies fall in the target's box.

    The box half-width is ``n**-(1 + alpha/4)`` for two symbols and
    ``n**-(1/(r-1) + alpha/4)`` for ``r`` symbols. With no unique candidate the
    nearest pseudonym is claimed and the report is flagged ambiguous. The
    claimed column is returned verbatim as the estimate of the target's data.
    """
    pop = cfg.known_profiles
    if pop.kind != "iid":
        raise ValueError("match_iid needs i.i.d. profiles")
    r = pop.r
    n = y.n
    if n != pop.n:
        raise ValueError(f"traces have {n} pseudonyms but {pop.n} profiles are known")
    freq = empirical_frequencies(y, r).reshape(n, -1)
    p = pop.params[cfg.target_user, 1:]
    a = cfg.a_n if cfg.center == "noise-range" else 0.0
    direction = (1.0 - r * p) / (r - 1) * a
    delta = band_width(n, cfg.alpha, r - 1)
    in_band, dist = _segment_match(freq, p, direction, delta)
    return _decide(y, in_band, dist, delta)


# ---------------------------------------------------------------------------
# Markov sources
# ---------------------------------------------------------------------------


def markov_transition_frequencies(y: TraceMatrix, topology: Topology) -> np.ndarray:
    """Free transition probabilities estimated from odd-numbered transitions.

    Only the pairs ``(y[0], y[1]), (y[2], y[3]), ...`` are used, so no two
    pairs share a sample. Returns ``(n, d)``; a coordinate whose source state
    never starts a used pair is NaN.
    """
    v = y.values
    m = v.shape[0]
    if m < 3:
        raise ValueError("need m >= 3 observations")
    used = 2 * (m // 2)
    src = v[0:used:2]
    dst = v[1:used:2]
    out = np.full((v.shape[1], topology.free_dim), np.nan)
    visits = {}
    for f, (i, l) in enumerate(topology.free_edges):
        if i not in visits:
            visits[i] = src == i
        mask = visits[i]
        total = mask.sum(axis=0)
        hits = (mask & (dst == l)).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[:, f] = np.where(total > 0, hits / np.maximum(total, 1), np.nan)
    return out


def transition_error_correlation(x: TraceMatrix, z: TraceMatrix, stride: int = 2, parts: bool = False):
    """Lag-1 correlation between corruption indicators of consecutive used transitions.

    A transition ``(k, k+1)`` is corrupted when either endpoint was altered by
    the channel. With ``stride=2`` the used transitions share no sample, so the
    indicators are independent; with ``stride=1`` neighbours share a sample.
    Indicators are centered per user before pooling. ``parts=True`` returns
    the (numerator, denominator) pair for pooling across calls.
    """
    flip = x.values != z.values
    m = flip.shape[0]
    starts = np.arange(0, m - 1, stride)
    e = (flip[starts] | flip[starts + 1]).astype(float)
    if e.shape[0] < 2:
        raise ValueError("need at least two used transitions")
    e = e - e.mean(axis=0)
    num = float((e[:-1] * e[1:]).sum())
    den = float((e * e).sum())
    if parts:
        return num, den
    return num / den if den > 0 else float("nan")


def _curve_match(freq: np.ndarray, curve: np.ndarray, delta: float):
    # freq: (n, d) with NaNs; curve: (G, d)
    diff = freq[:, None, :] - curve[None, :, :]
    valid = ~np.isnan(freq)
    absd = np.where(valid[:, None, :], np.abs(diff), 0.0)
    sup = absd.max(axis=2)
    sq = np.where(valid[:, None, :], diff * diff, 0.0).sum(axis=2)
    any_valid = valid.any(axis=1)
    in_band = any_valid & (sup.min(axis=1) <= delta)
    dist = np.where(any_valid, np.sqrt(sq.min(axis=1)), np.inf)
    return in_band, dist


def match_markov(y: TraceMatrix, cfg: AttackConfig, grid: int = 65) -> MatchReport:
    """Box matching on odd-transition estimates of the ``d`` free probabilities.

    Half-width ``n**-(1/d + alpha/4)``. In ``noise-range`` mode the target's
    curve is the free-coordinate part of :func:`observed_pair_law` for noise
    levels on a ``grid``-point mesh of ``[0, a_n]``.
    """
    pop = cfg.known_profiles
    if pop.kind != "markov":
        raise ValueError("match_markov needs Markov profiles")
    topo = pop.topology
    d = topo.free_dim
    if d < 1:
        raise ValueError("topology has no free transition probabilities")
    n = y.n
    if n != pop.n:
        raise ValueError(f"traces have {n} pseudonyms but {pop.n} profiles are known")
    freq = markov_transition_frequencies(y, topo)
    target = pop.params[cfg.target_user]
    levels = np.linspace(0.0, cfg.a_n, grid) if cfg.center == "noise-range" else np.zeros(1)
    law = observed_pair_law(target, levels)
    idx = np.array(topo.free_edges)
    curve = law[:, idx[:, 0], idx[:, 1]]
    delta = band_width(n, cfg.alpha, d)
    in_band, dist = _curve_match(freq, curve, delta)
    return _decide(y, in_band, dist, delta)


# ---------------------------------------------------------------------------
# Moment attacks
# ---------------------------------------------------------------------------


def theta_zero(p, R):
    """Long-run fraction of observed zeros for the two-state return chain."""
    return ((1.0 - R) * p + R) / (1.0 + p)


def theta_zero_one(p, R):
    """Long-run fraction of consecutive observed pairs equal to (0, 1)."""
    return (p * (1.0 - R) ** 2 + R * (p * R + (1.0 - p) * (1.0 - R))) / (1.0 + p)


def _moment_jacobian(p: float, R: float) -> np.ndarray:
    s = 1.0 + p
    num = p * (1.0 - 2.0 * R + 2.0 * R * R) + R * (1.0 - p) * (1.0 - R)
    dnum_dp = (1.0 - 2.0 * R + 2.0 * R * R) - R * (1.0 - R)
    dnum_dr = p * (4.0 * R - 2.0) + (1.0 - p) * (1.0 - 2.0 * R)
    return np.array(
        [
            [(1.0 - 2.0 * R) / s**2, (1.0 - p) / s],
            [(dnum_dp * s - num) / s**2, dnum_dr / s],
        ]
    )


@dataclass(frozen=True)
class MomentSolution:
    p: float
    R: float
    residual: float


_P_BOUNDS = (1e-9, 1.0 - 1e-9)
_R_BOUNDS = (0.0, 0.5 - 1e-9)


def solve_hmm_moments(theta0: float, theta01: float, tol: float = 1e-10, max_iter: int = 200) -> MomentSolution:
    """Invert the two moment equations over ``(0,1) x [0, 1/2)``.

    Damped Newton from a 4 x 4 grid of starts; steps are halved until the
    residual drops and iterates are projected back into the domain.
    """
    target = np.array([theta0, theta01])

    def resid(x):
        return np.array([theta_zero(x[0], x[1]), theta_zero_one(x[0], x[1])]) - target

    best = None
    for p0, r0 in itertools.product((0.1, 0.35, 0.65, 0.9), (0.05, 0.18, 0.32, 0.45)):
        x = np.array([p0, r0])
        f = resid(x)
        for _ in range(max_iter):
            if np.abs(f).max() < tol * 1e-2:
                break
            try:
                step = np.linalg.solve(_moment_jacobian(*x), f)
            except np.linalg.LinAlgError:
                break
            lam = 1.0
            while lam > 1e-8:
                cand = x - lam * step
                cand[0] = np.clip(cand[0], *_P_BOUNDS)
                cand[1] = np.clip(cand[1], *_R_BOUNDS)
                fc = resid(cand)
                if np.abs(fc).max() < np.abs(f).max():
                    x, f = cand, fc
                    break
                lam *= 0.5
            else:
                break
        res = float(np.abs(f).max())
        if best is None or res < best.residual:
            best = MomentSolution(float(x[0]), float(x[1]), res)
    if best.residual >= tol:
        raise InconsistentMomentsError(
            f"no (p, R) in the domain reproduces theta0={theta0:.6g}, theta01={theta01:.6g} "
            f"(best residual {best.residual:.3g})"
        )
    return best


def hmm_moments(y_col: np.ndarray) -> tuple[float, float]:
    """Sample fraction of zeros and of consecutive (0, 1) pairs."""
    y = np.asarray(y_col)
    if y.size < 2:
        raise ValueError("need at least two observations")
    zero = y == 0
    return float(zero.mean()), float((zero[:-1] & (y[1:] == 1)).mean())


def hmm_moment_attack(y_col: np.ndarray, chain: Topology = TWO_STATE_TOPOLOGY) -> tuple[float, float]:
    """Recover ``(p, R)`` of the two-state return chain from one observed sequence."""
    if chain != TWO_STATE_TOPOLOGY:
        raise ValueError("the moment equations are derived for the two-state return chain only")
    sol = solve_hmm_moments(*hmm_moments(y_col))
    return sol.p, sol.R


def gaussian_moment_attack(z_col: np.ndarray) -> tuple[float, float]:
    """Estimate ``(p, R)`` from a Gaussian-obfuscated two-state sequence.

    ``p`` is the clamped sample mean; ``R`` (noise variance) is the excess of
    the sample variance over the Bernoulli part ``p (1 - p)``.
    """
    z = np.asarray(z_col, dtype=float)
    p_hat = float(np.clip(z.mean(), 0.0, 1.0))
    var = float(z.var(ddof=1)) if z.size > 1 else 0.0
    return p_hat, max(0.0, var - p_hat * (1.0 - p_hat))
