"""Privacy-protection pipeline: per-user noise, symmetric channel, permutation.

The order is always ``X -> obfuscate -> Z -> anonymize -> Y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._random import STREAM_CHANNEL, STREAM_NOISE, STREAM_PERMUTATION, derive_rng
from .source_models import IidProfile, MarkovProfile, TraceMatrix, stationary_distribution


@dataclass(frozen=True)
class NoiseSchedule:
    """``a_n = c_prime * n**(-gamma)``, clamped to at most 1."""

    c_prime: float
    gamma: float

    def __post_init__(self):
        if not self.c_prime > 0:
            raise ValueError("c_prime must be positive")

    def raw(self, n: int) -> float:
        return self.c_prime * float(n) ** (-self.gamma)

    def a(self, n: int) -> float:
        return min(1.0, self.raw(n))

    def clamped(self, n: int) -> bool:
        return self.raw(n) > 1.0


@dataclass(frozen=True)
class ObservationSchedule:
    """``m(n) = ceil(c * n**eta)``."""

    c: float
    eta: float

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")

    def m(self, n: int) -> int:
        x = self.c * float(n) ** self.eta
        # Guard against ceil(10000.000000000002) == 10001.
        return max(1, math.ceil(x - 1e-9 * x))


@dataclass
class NoiseDraw:
    levels: np.ndarray
    a_n: float
    clamped: bool = False

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=float)
        if not self.a_n > 0:
            raise ValueError("a_n must be > 0")
        if np.any(self.levels < 0) or np.any(self.levels > self.a_n):
            raise ValueError("noise levels must lie in [0, a_n]")

    @property
    def n(self) -> int:
        return self.levels.size

    def to_record(self) -> dict:
        return {"a_n": self.a_n, "clamped": self.clamped, "levels": self.levels.tolist()}


@dataclass
class Permutation:
    """``forward[u]`` is the pseudonym of user ``u``; ``inverse`` undoes it."""

    forward: np.ndarray
    inverse: np.ndarray = field(init=False)

    def __post_init__(self):
        f = np.asarray(self.forward, dtype=np.int64)
        if f.ndim != 1 or not np.array_equal(np.sort(f), np.arange(f.size)):
            raise ValueError("forward must be a bijection on 0..n-1")
        self.forward = f
        self.inverse = np.empty_like(f)
        self.inverse[f] = np.arange(f.size)

    @property
    def n(self) -> int:
        return self.forward.size

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    def inverted(self) -> "Permutation":
        return Permutation(self.inverse)


def random_permutation(n: int, seed: int | None = None) -> Permutation:
    return Permutation(derive_rng(seed, STREAM_PERMUTATION).permutation(n))


def draw_noise_levels(n: int, sched: NoiseSchedule | float, seed: int | None = None) -> NoiseDraw:
    """Draw ``R_u ~ Uniform[0, a_n]`` independently for ``n`` users."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(sched, NoiseSchedule):
        a_n, clamped = sched.a(n), sched.clamped(n)
    else:
        a_n, clamped = float(sched), False
        if a_n > 1:
            a_n, clamped = 1.0, True
    if not a_n > 0:
        raise ValueError("a_n must be > 0")
    levels = derive_rng(seed, STREAM_NOISE).uniform(0.0, a_n, n)
    return NoiseDraw(levels, a_n, clamped)


def obfuscate(
    x: TraceMatrix,
    noise: NoiseDraw,
    r: int | None = None,
    seed: int | None = None,
    regenerate_every: int | None = None,
) -> TraceMatrix:
    """Pass every column through an r-ary symmetric channel with error rate ``R_u``.

    A sample is kept with probability ``1 - R_u``; otherwise it is replaced by
    one of the other ``r - 1`` symbols chosen uniformly. ``R_u`` is fixed for
    the whole column unless ``regenerate_every`` is set, in which case a fresh
    ``Uniform[0, a_n]`` level is drawn for each block of that many samples.
    """
    if x.stage != "X":
        raise ValueError(f"obfuscate expects stage X, got {x.stage}")
    r = r or x.r
    if noise.n != x.n:
        raise ValueError(f"noise draw has {noise.n} users, traces have {x.n}")
    m, n = x.values.shape
    z = np.empty_like(x.values)
    for j in range(n):
        rng = derive_rng(seed, STREAM_CHANNEL, j)
        col = x.values[:, j]
        if regenerate_every:
            blocks = -(-m // regenerate_every)
            levels = np.repeat(rng.uniform(0.0, noise.a_n, blocks), regenerate_every)[:m]
            levels[:regenerate_every] = noise.levels[j]
        else:
            levels = noise.levels[j]
        flip = rng.random(m) < levels
        if r == 2:
            z[:, j] = np.where(flip, 1 - col, col)
        else:
            offset = rng.integers(1, r, m)
            z[:, j] = np.where(flip, (col + offset) % r, col)
    return TraceMatrix(z, "Z", r)


@dataclass(frozen=True)
class EffectiveParameters:
    q: np.ndarray
    transition_error: float | None = None


def effective_parameters(profile: IidProfile | MarkovProfile, R_u: float) -> EffectiveParameters:
    """Symbol law after the channel, and for chains the per-transition error rate.

    For an i.i.d. pmf, ``Q(i) = P(i) + (1 - r P(i)) R / (r - 1)``. For a chain
    ``q`` is the obfuscated stationary law and ``transition_error`` is
    ``R (2 - R)``, the chance that at least one end of a transition is altered.
    """
    if not 0.0 <= R_u <= 1.0:
        raise ValueError("R_u must lie in [0, 1]")
    if isinstance(profile, IidProfile):
        p, r = profile.pmf, profile.r
        return EffectiveParameters(p + (1.0 - r * p) * R_u / (r - 1))
    pi = stationary_distribution(profile)
    r = profile.states
    return EffectiveParameters(pi + (1.0 - r * pi) * R_u / (r - 1), R_u * (2.0 - R_u))


def channel_matrix(r: int, R: float) -> np.ndarray:
    """``C[x, z] = P(Z = z | X = x)`` for the r-ary symmetric channel."""
    c = np.full((r, r), R / (r - 1))
    np.fill_diagonal(c, 1.0 - R)
    return c


def observed_pair_law(transitions: np.ndarray, R: float | np.ndarray) -> np.ndarray:
    """Law of ``Z(k+1)`` given ``Z(k)`` for a stationary chain seen through the channel.

    Vectorized over ``R`` (leading axis). Returns ``(..., r, r)`` conditional
    matrices whose rows sum to one.
    """
    t = np.asarray(transitions, dtype=float)
    r = t.shape[0]
    pi = stationary_distribution(t)
    joint = pi[:, None] * t
    R = np.atleast_1d(np.asarray(R, dtype=float))
    c = np.broadcast_to(np.eye(r), (R.size, r, r)) * (1.0 - R[:, None, None]) + (
        (1.0 - np.eye(r)) * (R[:, None, None] / (r - 1))
    )
    jz = np.transpose(c, (0, 2, 1)) @ joint @ c
    return jz / jz.sum(axis=2, keepdims=True)


def obfuscate_gaussian(x: TraceMatrix, noise: NoiseDraw, seed: int | None = None) -> TraceMatrix:
    """Add ``N(0, R_u)`` noise to every sample of user ``u``.

    ``R_u`` is the *variance* of the added noise.
    """
    if x.stage != "X":
        raise ValueError(f"obfuscate_gaussian expects stage X, got {x.stage}")
    if x.r not in (None, 2):
        raise ValueError("Gaussian obfuscation is defined for two-state data")
    if noise.n != x.n:
        raise ValueError(f"noise draw has {noise.n} users, traces have {x.n}")
    m, n = x.values.shape
    z = np.empty((m, n))
    for j in range(n):
        rng = derive_rng(seed, STREAM_CHANNEL, j)
        z[:, j] = x.values[:, j] + rng.standard_normal(m) * math.sqrt(noise.levels[j])
    return TraceMatrix(z, "Z-real")


def anonymize(z: TraceMatrix, perm: Permutation) -> TraceMatrix:
    """Relabel columns: ``Y[:, perm.forward[u]] = Z[:, u]``."""
    if perm.n != z.n:
        raise ValueError(f"permutation over {perm.n} users applied to {z.n} columns")
    stage = {"Z": "Y", "Z-real": "Y-real", "Y": "Z", "Y-real": "Z-real"}.get(z.stage)
    if stage is None:
        raise ValueError(f"anonymize expects an obfuscated stage, got {z.stage}")
    y = np.empty_like(z.values)
    y[:, perm.forward] = z.values
    return TraceMatrix(y, stage, z.r)


def deanonymize(y: TraceMatrix, perm: Permutation) -> TraceMatrix:
    """Inverse of :func:`anonymize`."""
    return anonymize(y, perm.inverted())
