import inspect

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anonmatch import adversary
from anonmatch.adversary import (
    AttackConfig,
    InconsistentMomentsError,
    band_width,
    empirical_frequencies,
    gaussian_moment_attack,
    hmm_moment_attack,
    hmm_moments,
    markov_transition_frequencies,
    match_iid,
    match_markov,
    solve_hmm_moments,
    theta_zero,
    theta_zero_one,
    transition_error_correlation,
)
from anonmatch.mechanisms import NoiseDraw, Permutation, anonymize, obfuscate, random_permutation
from anonmatch.source_models import (
    THREE_STATE_TOPOLOGY,
    TWO_STATE_TOPOLOGY,
    Topology,
    TraceMatrix,
    UserPopulation,
    generate_traces,
    sample_markov_profiles,
)


def return_chain(p):
    return np.array([[0.0, 1.0], [p, 1.0 - p]])


def test_empirical_frequency_examples():
    assert empirical_frequencies(TraceMatrix(np.ones((10, 1), dtype=int), "Y", 2))[0] == 1.0
    assert empirical_frequencies(TraceMatrix(np.array([[1], [0], [1], [0]]), "Y", 2))[0] == 0.5
    x = generate_traces(UserPopulation.from_probabilities([0.34]), 100_000, seed=1)
    assert abs(empirical_frequencies(x)[0] - 0.34) < 0.006
    three = TraceMatrix(np.array([[0, 1], [1, 2], [2, 2]]), "Y", 3)
    assert empirical_frequencies(three).shape == (2, 2)


def test_band_width_examples():
    assert band_width(100, 0.2) == pytest.approx(0.0079433, rel=1e-4)
    # n**-(1/3 + 0.075) at n = 100.
    assert band_width(100, 0.3, 3) == pytest.approx(0.152522, rel=1e-5)
    with pytest.raises(ValueError):
        band_width(10, 0.0)


@given(st.integers(2, 10_000), st.floats(0.01, 2.0), st.floats(0.01, 2.0), st.integers(1, 5))
def test_band_width_monotone(n, a1, a2, dim):
    lo, hi = sorted((a1, a2))
    assert band_width(n, hi, dim) <= band_width(n, lo, dim)
    assert band_width(n + 1, lo, dim) < band_width(n, lo, dim)


def test_noiseless_unpermuted_match_recovers_everything():
    pop = UserPopulation.from_probabilities([0.2, 0.5, 0.8])
    x = generate_traces(pop, 20_000, seed=1)
    y = anonymize(obfuscate(x, NoiseDraw(np.zeros(3), 1e-9), seed=1), Permutation.identity(3))
    # alpha = 8 narrows the band to 3**-3 so only the target falls inside.
    rep = match_iid(y, AttackConfig(8.0, pop, 0.0))
    assert rep.claimed_pseudonym == 0 and not rep.ambiguous and rep.band_claim == 0
    assert np.array_equal(rep.sample_estimates, x.values[:, 0])
    assert rep.sample_estimates.size == x.m


def test_match_finds_target_after_permutation():
    pop = UserPopulation.from_probabilities([0.2, 0.5, 0.8, 0.35])
    x = generate_traces(pop, 50_000, seed=2)
    z = obfuscate(x, NoiseDraw(np.full(4, 0.005), 0.01), seed=2)
    perm = random_permutation(4, seed=2)
    rep = match_iid(anonymize(z, perm), AttackConfig(0.2, pop, 0.01, target_user=3))
    assert rep.claimed_pseudonym == perm.forward[3]


def test_ambiguity_reported_not_raised():
    pop = UserPopulation.from_probabilities([0.5, 0.5])
    x = generate_traces(pop, 100, seed=3)
    y = anonymize(obfuscate(x, NoiseDraw(np.zeros(2), 0.1), seed=3), Permutation.identity(2))
    rep = match_iid(y, AttackConfig(0.01, pop, 0.1))
    assert rep.ambiguous and rep.band_claim is None
    assert rep.claimed_pseudonym in (0, 1)
    rec = rep.to_record("est.csv")
    assert rec["sample_estimates_ref"] == "est.csv" and rec["ambiguous"] is True


def test_attack_config_validation():
    pop = UserPopulation.from_probabilities([0.5, 0.3])
    with pytest.raises(ValueError):
        AttackConfig(0.0, pop, 0.1)
    with pytest.raises(ValueError):
        AttackConfig(0.2, pop, 0.1, target_user=2)
    with pytest.raises(ValueError):
        AttackConfig(0.2, pop, 0.1, center="elsewhere")


def test_attacks_never_see_permutation_or_noise():
    for fn in (match_iid, match_markov, hmm_moment_attack, gaussian_moment_attack):
        params = set(inspect.signature(fn).parameters)
        assert not params & {"perm", "permutation", "noise", "levels", "z"}
    assert set(inspect.signature(AttackConfig).parameters) == {"alpha", "known_profiles", "a_n", "target_user", "center"}


def test_two_user_chernoff_envelope():
    # Users far apart relative to band and noise: identification must succeed
    # at least as often as the Chernoff envelope promises.
    n_trials, m, alpha = 200, 4000, 8.0
    pop = UserPopulation.from_probabilities([0.3, 0.6])
    delta = band_width(2, alpha)
    a_n = 0.01
    assert abs(0.3 - 0.6) > 2 * (delta + a_n)
    wins = 0
    for t in range(n_trials):
        x = generate_traces(pop, m, seed=t)
        z = obfuscate(x, NoiseDraw(np.full(2, a_n / 2), a_n), seed=t)
        perm = random_permutation(2, seed=t)
        rep = match_iid(anonymize(z, perm), AttackConfig(alpha, pop, a_n))
        wins += rep.claimed_pseudonym == perm.forward[0]
    bound = 1 - 4 * np.exp(-m * delta**2 / 12)
    assert wins / n_trials >= bound


def test_odd_transition_frequencies_examples():
    cycle = Topology.from_edges([(0, 1), (1, 2), (2, 0), (0, 0)], r=3)
    y = TraceMatrix(np.array([[0, 1, 2, 0, 1, 2, 0, 1]]).T, "Y", 3)
    f = markov_transition_frequencies(y, cycle)
    assert f.shape == (1, 1)
    # Only free edge is (0, 0); pairs used are (0,1), (2,0), (1,2), (0,1).
    assert f[0, 0] == 0.0

    det = Topology.from_edges([(0, 1), (1, 0), (1, 1)])
    y = TraceMatrix(np.array([[0, 1, 0, 1, 1, 1]]).T, "Y", 2)
    # free edge (1, 0): pairs (0,1), (0,1), (1,1) -> one visit to 1, no move to 0.
    assert markov_transition_frequencies(y, det)[0, 0] == 0.0

    four = TraceMatrix(np.array([[1, 0, 1, 0]]).T, "Y", 2)  # pairs (1,0), (1,0)
    assert markov_transition_frequencies(four, TWO_STATE_TOPOLOGY)[0, 0] == 1.0

    never = TraceMatrix(np.array([[0, 1, 0, 1]]).T, "Y", 2)  # state 1 never starts a pair
    assert np.isnan(markov_transition_frequencies(never, TWO_STATE_TOPOLOGY)[0, 0])
    with pytest.raises(ValueError):
        markov_transition_frequencies(TraceMatrix(np.array([[0, 1]]).T, "Y", 2), TWO_STATE_TOPOLOGY)


def test_odd_transition_estimate_of_return_chain():
    pop = UserPopulation.from_matrices(TWO_STATE_TOPOLOGY, [return_chain(0.5)])
    x = generate_traces(pop, 1_000_000, seed=4)
    f = markov_transition_frequencies(x, TWO_STATE_TOPOLOGY)
    assert abs(f[0, 0] - 0.5) < 0.005


def test_odd_transition_errors_are_uncorrelated():
    pop = sample_markov_profiles(20, THREE_STATE_TOPOLOGY, seed=5)
    x = generate_traces(pop, 20_000, seed=5)
    z = obfuscate(x, NoiseDraw(np.full(20, 0.2), 0.2), 3, seed=5)
    assert abs(transition_error_correlation(x, z, 2)) < 0.02
    # Overlapping transitions share a sample and are visibly correlated.
    assert transition_error_correlation(x, z, 1) > 0.3


def test_markov_match_noiseless():
    pop = sample_markov_profiles(10, THREE_STATE_TOPOLOGY, seed=6)
    x = generate_traces(pop, 40_000, seed=6)
    y = anonymize(obfuscate(x, NoiseDraw(np.zeros(10), 1e-9), 3, seed=6), Permutation.identity(10))
    for center in ("true", "noise-range"):
        rep = match_markov(y, AttackConfig(0.3, pop, 0.0, center=center))
        assert rep.claimed_pseudonym == 0
        assert np.array_equal(rep.sample_estimates, x.values[:, 0])


def test_markov_match_needs_markov_profiles():
    pop = UserPopulation.from_probabilities([0.5, 0.3])
    y = TraceMatrix(np.zeros((4, 2), dtype=int), "Y", 2)
    with pytest.raises(ValueError):
        match_markov(y, AttackConfig(0.3, pop, 0.1))


def test_moment_closed_forms():
    assert theta_zero(0.5, 0.2) == pytest.approx(0.4)
    assert theta_zero_one(0.5, 0.2) == pytest.approx(0.28)


def test_moment_solver_inverts_exact_moments():
    sol = solve_hmm_moments(0.4, 0.28)
    assert sol.p == pytest.approx(0.5, abs=1e-8)
    assert sol.R == pytest.approx(0.2, abs=1e-8)


@given(st.floats(0.05, 0.95), st.floats(0.0, 0.45))
def test_moment_solver_exact_on_grid(p, R):
    sol = solve_hmm_moments(theta_zero(p, R), theta_zero_one(p, R))
    assert sol.residual < 1e-10


def test_moment_jacobian_matches_finite_differences():
    for p, R in [(0.3, 0.1), (0.7, 0.4), (0.5, 0.2)]:
        h = 1e-6
        fd = np.array(
            [
                [(theta_zero(p + h, R) - theta_zero(p - h, R)) / (2 * h), (theta_zero(p, R + h) - theta_zero(p, R - h)) / (2 * h)],
                [(theta_zero_one(p + h, R) - theta_zero_one(p - h, R)) / (2 * h), (theta_zero_one(p, R + h) - theta_zero_one(p, R - h)) / (2 * h)],
            ]
        )
        assert adversary._moment_jacobian(p, R) == pytest.approx(fd, abs=1e-7)


def test_moment_closed_forms_match_simulation():
    pop = UserPopulation.from_matrices(TWO_STATE_TOPOLOGY, [return_chain(0.3)])
    x = generate_traces(pop, 1_000_000, seed=7)
    z = obfuscate(x, NoiseDraw(np.array([0.15]), 0.15), seed=7)
    t0, t01 = hmm_moments(z.values[:, 0])
    assert t0 == pytest.approx(theta_zero(0.3, 0.15), abs=0.003)
    assert t01 == pytest.approx(theta_zero_one(0.3, 0.15), abs=0.003)


def test_inconsistent_moments_raise():
    # More zeros than the chain can ever produce with R < 1/2.
    with pytest.raises(InconsistentMomentsError):
        solve_hmm_moments(0.9, 0.05)


def test_hmm_attack_rejects_other_chains():
    with pytest.raises(ValueError):
        hmm_moment_attack(np.array([0, 1, 1, 0]), THREE_STATE_TOPOLOGY)


def test_gaussian_moment_attack_examples():
    x = generate_traces(UserPopulation.from_probabilities([0.3]), 200_000, seed=1).values[:, 0]
    p, R = gaussian_moment_attack(x.astype(float))
    assert p == pytest.approx(0.3, abs=0.005) and R < 0.003
    assert gaussian_moment_attack(np.ones(50)) == (1.0, 0.0)
    rng = np.random.default_rng(2)
    x = generate_traces(UserPopulation.from_probabilities([0.3]), 1_000_000, seed=2).values[:, 0]
    p, R = gaussian_moment_attack(x + rng.normal(0, 0.2, x.size))
    assert R == pytest.approx(0.04, abs=0.003)
