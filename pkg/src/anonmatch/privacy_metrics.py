"""Privacy measurements: exact small-n posteriors, mutual information, error rates.

Mutual information is reported in bits throughout.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterator

import numpy as np
from scipy.special import betainc, betaincc, betaln, logsumexp

from ._random import STREAM_TRIAL, derive_seed
from .mechanisms import (
    NoiseSchedule,
    ObservationSchedule,
    anonymize,
    draw_noise_levels,
    obfuscate,
    random_permutation,
)
from .source_models import DensityConfig, TraceMatrix, UserPopulation, generate_traces, sample_iid_profiles

ENUMERATION_CAP = 7
_FLAT_WIDTH = 1e-7


class QuadratureError(ArithmeticError):
    """A marginal likelihood could not be evaluated to the required accuracy."""


def binary_entropy(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(p * np.log2(p) + (1 - p) * np.log2(1 - p))
    return np.nan_to_num(h, nan=0.0)


# ---------------------------------------------------------------------------
# Exact posterior for small n
# ---------------------------------------------------------------------------


@dataclass
class PosteriorTable:
    """Adversary posterior for target user 0 given the full anonymized matrix.

    ``perm_posterior[j] = P(pseudonym of user 0 is j | Y)``;
    ``data_posterior[k] = P(X_0(k) = 1 | Y)``.
    """

    perm_posterior: np.ndarray
    data_posterior: np.ndarray
    normalization_residual: float
    prior: float

    def at(self, k: int) -> float:
        return float(self.data_posterior[k])


def _log_interval_mass(a, b, lo, hi):
    """log(I_hi - I_lo) for the regularized incomplete beta, without cancellation."""
    i_lo = betainc(a, b, lo)
    upper = i_lo > 0.5
    diff = np.where(upper, betaincc(a, b, lo) - betaincc(a, b, hi), betainc(a, b, hi) - i_lo)
    with np.errstate(divide="ignore"):
        return np.where(diff > 0, np.log(np.where(diff > 0, diff, 1.0)), -np.inf)


def _q_interval(p: np.ndarray, a_n: float):
    q_end = p + (1.0 - 2.0 * p) * a_n
    return np.minimum(p, q_end), np.maximum(p, q_end), np.abs(1.0 - 2.0 * p) * a_n


def marginal_loglik(p, s, m: int, a_n: float) -> np.ndarray:
    """``log( (1/a_n) * integral_0^a_n q^s (1-q)^(m-s) dr )`` with ``q = p + (1-2p) r``.

    ``q`` is linear in ``r``, so the integral is a difference of regularized
    incomplete beta functions. Broadcasts over ``p`` and ``s``.
    """
    p = np.asarray(p, dtype=float)
    s = np.asarray(s, dtype=float)
    lo, hi, width = _q_interval(p, a_n)
    a, b = s + 1.0, m - s + 1.0
    flat = width < _FLAT_WIDTH
    with np.errstate(divide="ignore"):
        q_mid = np.where(flat, p + (1.0 - 2.0 * p) * a_n / 2.0, 0.5)
        flat_val = s * np.log(q_mid) + (m - s) * np.log1p(-q_mid)
        safe_width = np.where(flat, 1.0, width)
        full = betaln(a, b) + _log_interval_mass(a, b, np.where(flat, 0.0, lo), np.where(flat, 1.0, hi)) - np.log(safe_width)
    out = np.where(flat, flat_val, full)
    if np.any(np.isnan(out)):
        raise QuadratureError("marginal likelihood evaluated to NaN")
    return out


def _conditional_truth_prob(p: float, a_n: float, s: np.ndarray, m: int, z: np.ndarray) -> np.ndarray:
    """P(X(k) = 1 | column with ``s`` ones, Z(k) = z) for a user with parameter ``p``.

    The noise level is integrated against its posterior given the rest of the
    column.
    """
    lo, hi, width = _q_interval(np.asarray(p), a_n)
    # Kernel of the other m-1 samples: q^(a-1) (1-q)^(b-1).
    a = np.where(z == 1, s, s + 1).astype(float)
    b = np.where(z == 1, m - s + 1, m - s).astype(float)
    if width < _FLAT_WIDTH:
        r_mean = np.full(s.shape, a_n / 2.0)
        q_mean = np.full(s.shape, p + (1.0 - 2.0 * p) * a_n / 2.0)
    else:
        with np.errstate(invalid="ignore"):
            ratio = np.exp(_log_interval_mass(a + 1, b, lo, hi) - _log_interval_mass(a, b, lo, hi))
            q_mean = a / (a + b) * ratio
        q_mean = np.where(np.isfinite(q_mean), np.clip(q_mean, lo, hi), (lo + hi) / 2.0)
        r_mean = np.clip((q_mean - p) / (1.0 - 2.0 * p), 0.0, a_n)
    with np.errstate(invalid="ignore", divide="ignore"):
        one = p * (1.0 - r_mean) / q_mean
        zero = p * r_mean / (1.0 - q_mean)
    return np.clip(np.where(z == 1, one, zero), 0.0, 1.0)


@lru_cache(maxsize=None)
def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64)


def exact_posterior_small(
    y: TraceMatrix, pop: UserPopulation, a_n: float, cap: int = ENUMERATION_CAP
) -> PosteriorTable:
    """Exact adversary posterior for the two-state i.i.d. model by enumeration.

    Each (user, pseudonym) likelihood marginalizes the unknown noise level;
    the pseudonym posterior of user 0 sums the product of likelihoods over all
    ``n!`` assignments.
    """
    n = y.n
    if n > cap:
        raise ValueError(f"n={n} exceeds the enumeration cap {cap}")
    if pop.kind != "iid" or pop.r != 2:
        raise ValueError("exact posteriors are implemented for the two-state i.i.d. model")
    if pop.n != n:
        raise ValueError("population and traces disagree on n")
    if not 0 < a_n <= 1:
        raise ValueError("a_n must lie in (0, 1]")
    v = y.values
    m = v.shape[0]
    s = (v == 1).sum(axis=0)
    p = pop.p
    ll = marginal_loglik(p[:, None], s[None, :], m, a_n)
    perms = _permutations(n)
    logw = ll[np.arange(n)[None, :], perms].sum(axis=1)
    total = logsumexp(logw)
    if not np.isfinite(total):
        raise QuadratureError("every assignment has zero likelihood")
    post = np.array([np.exp(logsumexp(logw[perms[:, 0] == j]) - total) if np.any(perms[:, 0] == j) else 0.0 for j in range(n)])
    post = np.nan_to_num(post)
    resid = abs(post.sum() - 1.0)
    post = post / post.sum()
    # Per pseudonym j, P(X_0(k)=1 | user 0 is j, Y_j) takes one of two values
    # depending on Y_j(k).
    cond1 = _conditional_truth_prob(p[0], a_n, s, m, np.ones(n, dtype=int))
    cond0 = _conditional_truth_prob(p[0], a_n, s, m, np.zeros(n, dtype=int))
    live = post > 0
    data = np.where(v[:, live] == 1, cond1[live], cond0[live]) @ post[live]
    return PosteriorTable(post, np.clip(data, 0.0, 1.0), float(resid), float(p[0]))


@dataclass
class MIEstimate:
    value_bits: float
    std_error: float
    method: str
    trials: int
    degenerate: bool = False
    details: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "value_bits": self.value_bits,
            "std_error": self.std_error,
            "trials": self.trials,
            "degenerate": self.degenerate,
            **self.details,
        }


@dataclass
class PosteriorTrial:
    p1: float
    x1k: int
    posterior: float
    perm_posterior: np.ndarray
    true_pseudonym: int
    population: UserPopulation = field(repr=False)
    q: np.ndarray = field(repr=False)


def posterior_trials(
    n: int,
    noise: NoiseSchedule | float,
    obs: ObservationSchedule | int,
    trials: int,
    seed: int | None = None,
    k: int = 0,
    density: DensityConfig | None = None,
    probabilities: np.ndarray | None = None,
    cap: int = ENUMERATION_CAP,
) -> Iterator[PosteriorTrial]:
    """Run the two-state pipeline ``trials`` times and yield exact posteriors.

    Profiles are redrawn from ``density`` each trial unless fixed
    ``probabilities`` (P(symbol 1) per user) are given.
    """
    if n > cap:
        raise ValueError(f"n={n} exceeds the enumeration cap {cap}")
    m = obs.m(n) if isinstance(obs, ObservationSchedule) else int(obs)
    if not 0 <= k < m:
        raise ValueError(f"time index {k} outside 0..{m - 1}")
    for t in range(trials):
        ts = derive_seed(seed, STREAM_TRIAL, t)
        if probabilities is None:
            pop = sample_iid_profiles(n, 2, density, seed=ts)
        else:
            pop = UserPopulation.from_probabilities(probabilities, seed=ts)
        x = generate_traces(pop, m, seed=ts)
        draw = draw_noise_levels(n, noise, seed=ts)
        z = obfuscate(x, draw, 2, seed=ts)
        perm = random_permutation(n, seed=ts)
        y = anonymize(z, perm)
        table = exact_posterior_small(y, pop, draw.a_n, cap=cap)
        p = pop.p
        yield PosteriorTrial(
            p1=float(p[0]),
            x1k=int(x.values[k, 0]),
            posterior=table.at(k),
            perm_posterior=table.perm_posterior,
            true_pseudonym=int(perm.forward[0]),
            population=pop,
            q=p + (1.0 - 2.0 * p) * draw.levels,
        )


def mi_from_trials(results: list[PosteriorTrial], where: np.ndarray | None = None) -> MIEstimate:
    p1 = np.array([r.p1 for r in results])
    post = np.array([r.posterior for r in results])
    gain = binary_entropy(p1) - binary_entropy(post)
    if where is not None:
        gain = gain[np.asarray(where, dtype=bool)]
    t = gain.size
    if t == 0:
        raise ValueError("no trials selected")
    se = float(gain.std(ddof=1) / math.sqrt(t)) if t > 1 else float("inf")
    return MIEstimate(float(gain.mean()), se, "exact-small", t)


def exact_mi_small(
    n: int | UserPopulation,
    noise: NoiseSchedule | float,
    obs: ObservationSchedule | int,
    k: int = 0,
    trials: int = 1000,
    seed: int | None = None,
    density: DensityConfig | None = None,
    probabilities: np.ndarray | None = None,
) -> MIEstimate:
    """Monte Carlo estimate of ``I(X_0(k); Y | profiles)`` using exact posteriors.

    Each trial contributes ``h(p_0) - h(P(X_0(k)=1 | Y))``; the mean over
    trials is the mutual information given the (known) profiles. Passing a
    population as ``n`` fixes its profiles across trials.
    """
    if isinstance(n, UserPopulation):
        probabilities, n = n.p, n.n
    results = list(posterior_trials(n, noise, obs, trials, seed, k, density, probabilities))
    est = mi_from_trials(results)
    est.details = {"n": n, "k": k, "seed": seed}
    return est


# ---------------------------------------------------------------------------
# Plug-in bound, error rates, DP ratio
# ---------------------------------------------------------------------------


def joint_counts(x_samples, x_estimates, alphabet: int | None = None) -> np.ndarray:
    """Contingency table of paired integer symbols."""
    x = np.asarray(x_samples, dtype=np.int64).ravel()
    e = np.asarray(x_estimates, dtype=np.int64).ravel()
    if x.shape != e.shape:
        raise ValueError("truth and estimates must be paired")
    k = alphabet or int(max(x.max(initial=0), e.max(initial=0))) + 1
    return np.bincount(x * k + e, minlength=k * k).reshape(k, k).astype(float)


def plugin_mi_from_counts(counts: np.ndarray) -> MIEstimate:
    """Miller-Madow corrected plug-in MI (bits) of a contingency table."""
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    if n <= 0:
        raise ValueError("no samples")
    rows = counts.sum(axis=1) > 0
    cols = counts.sum(axis=0) > 0
    if rows.sum() < 2 or cols.sum() < 2:
        return MIEstimate(0.0, 0.0, "plugin-lower-bound", int(n), degenerate=True)
    pj = counts[np.ix_(rows, cols)] / n
    px = pj.sum(axis=1, keepdims=True)
    pe = pj.sum(axis=0, keepdims=True)
    nz = pj > 0
    pmi = np.log2(pj[nz] / (px @ pe)[nz])
    mi = float((pj[nz] * pmi).sum())
    # Miller-Madow: each entropy gains (K - 1) / (2N) nats.
    kx, ke, kxe = int(rows.sum()), int(cols.sum()), int(nz.sum())
    mi -= (kx - 1 + ke - 1 - (kxe - 1)) / (2.0 * n * math.log(2))
    var = float((pj[nz] * pmi**2).sum()) - float((pj[nz] * pmi).sum()) ** 2
    se = math.sqrt(max(var, 0.0) / n)
    return MIEstimate(float(max(mi, 0.0)), se, "plugin-lower-bound", int(n))


def plugin_mi_lower_bound(x_samples, x_estimates) -> MIEstimate:
    """Plug-in MI of the empirical joint of (truth, estimate), Miller-Madow corrected.

    By data processing, ``I(X; Y) >= I(X; estimate)``, so this lower-bounds the
    leakage of whatever attack produced the estimates. The standard error is
    the delta-method one and assumes independent pairs.
    """
    x = np.asarray(x_samples).ravel()
    e = np.asarray(x_estimates).ravel()
    if x.shape != e.shape:
        raise ValueError("truth and estimates must be paired")
    if x.size == 0:
        raise ValueError("no samples")
    _, xi = np.unique(x, return_inverse=True)
    _, ei = np.unique(e, return_inverse=True)
    k = int(max(xi.max(), ei.max())) + 1
    return plugin_mi_from_counts(joint_counts(xi, ei, k))


@dataclass(frozen=True)
class ErrorRate:
    pe: float
    std_error: float
    trials: int
    deanonymization_failure: float | None = None


def attack_error_rate(truth, estimates, k: int | None = None, matched=None) -> ErrorRate:
    """Fraction of trials whose estimate of the target's sample at time ``k`` is wrong.

    ``truth`` and ``estimates`` are ``(trials,)`` or ``(trials, m)``. With
    ``k=None`` the error is averaged over all times (the law is the same at
    every time, so this estimates the same quantity with less variance).
    ``matched`` optionally flags, per trial, whether de-anonymization succeeded.
    """
    t = np.atleast_1d(np.asarray(truth))
    e = np.atleast_1d(np.asarray(estimates))
    if t.shape != e.shape:
        raise ValueError("truth and estimates must have the same shape")
    if t.shape[0] < 1:
        raise ValueError("need at least one trial")
    wrong = (t != e).astype(float)
    if wrong.ndim == 2:
        wrong = wrong[:, k] if k is not None else wrong.mean(axis=1)
    trials = wrong.shape[0]
    se = float(wrong.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    fail = None if matched is None else float(1.0 - np.mean(np.asarray(matched, dtype=float)))
    return ErrorRate(float(wrong.mean()), se, trials, fail)


@dataclass(frozen=True)
class DPEstimate:
    epsilon: float
    infinite: bool = False


def dp_epsilon(post, prior, k: int | None = None) -> DPEstimate:
    """Largest log change in odds between any two values, posterior vs prior.

    ``post`` is a :class:`PosteriorTable` (read at time ``k``), a scalar
    ``P(X = 1 | Y)``, or a full pmf; ``prior`` likewise a scalar P(X = 1) or pmf.
    """
    if isinstance(post, PosteriorTable):
        post = post.at(0 if k is None else k)
    post = np.atleast_1d(np.asarray(post, dtype=float))
    prior = np.atleast_1d(np.asarray(prior, dtype=float))
    if post.size == 1:
        post = np.array([1.0 - post[0], post[0]])
    if prior.size == 1:
        prior = np.array([1.0 - prior[0], prior[0]])
    if np.any(prior <= 0) or np.any(prior >= 1):
        raise ValueError("prior must lie strictly inside (0, 1)")
    if np.any(post <= 0):
        return DPEstimate(math.inf, True)
    ratio = np.log(post) - np.log(prior)
    return DPEstimate(float(ratio.max() - ratio.min()))


# ---------------------------------------------------------------------------
# Critical set
# ---------------------------------------------------------------------------


def epsilon_n(n: int, beta: float, r: int = 2) -> float:
    return float(n) ** (-(1.0 / (r - 1) - beta / 2.0))


@dataclass
class CriticalSet:
    members: np.ndarray
    epsilon_n: float
    a_n: float

    @property
    def size(self) -> int:
        return int(self.members.size)


def critical_set_mask(p: np.ndarray, q: np.ndarray, p1, eps: float, a_n: float) -> np.ndarray:
    """Membership mask for i.i.d. users with parameters ``p`` and obfuscated laws ``q``.

    Two-state inputs are 1-D (P(symbol 1)) and a target with ``p1 >= 1/2`` is
    handled by relabeling the symbols. r-state inputs are ``(n, r)`` pmfs and
    the mask intersects the per-symbol conditions, using the mirrored
    conditions for symbols whose target probability is at least ``1/r``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.ndim == 1:
        t = float(np.atleast_1d(p1)[-1])
        if t >= 0.5:
            p, q, t = 1.0 - p, 1.0 - q, 1.0 - t
        top = t + (1.0 - 2.0 * t) * a_n
        return (t <= p) & (p <= t + eps) & (t + eps <= q) & (q <= top)
    p1 = np.asarray(p1, dtype=float)
    r = p.shape[1]
    ok = np.ones(p.shape[0], dtype=bool)
    for i in range(r):
        t = p1[i]
        if t < 1.0 / r:
            top = t + (1.0 - r * t) * a_n / (r - 1)
            ok &= (t <= p[:, i]) & (p[:, i] <= t + eps) & (t + eps <= q[:, i]) & (q[:, i] <= top)
        else:
            bottom = t - (r * t - 1.0) * a_n / (r - 1)
            ok &= (t - eps <= p[:, i]) & (p[:, i] <= t) & (bottom <= q[:, i]) & (q[:, i] <= t - eps)
    return ok


def critical_set(pop: UserPopulation, q_draws, p1, beta: float, noise: NoiseSchedule | float) -> CriticalSet:
    """Users whose (P_u, Q_u) are confusable with the target after obfuscation.

    ``epsilon_n = n**-(1/(r-1) - beta/2)``; ``a_n`` comes from ``noise``.
    """
    n, r = pop.n, pop.r
    a_n = noise.a(n) if isinstance(noise, NoiseSchedule) else float(noise)
    eps = epsilon_n(n, beta, r)
    if r == 2:
        mask = critical_set_mask(pop.p, np.asarray(q_draws, dtype=float).reshape(-1), float(np.atleast_1d(p1)[-1]), eps, a_n)
    else:
        mask = critical_set_mask(pop.params, q_draws, p1, eps, a_n)
    return CriticalSet(np.flatnonzero(mask), eps, a_n)


def conditioned(results: list[PosteriorTrial], event: Callable[[PosteriorTrial], bool]) -> np.ndarray:
    return np.array([bool(event(r)) for r in results])
