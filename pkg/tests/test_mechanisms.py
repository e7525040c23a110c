import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anonmatch.mechanisms import (
    NoiseDraw,
    NoiseSchedule,
    ObservationSchedule,
    Permutation,
    anonymize,
    channel_matrix,
    deanonymize,
    draw_noise_levels,
    effective_parameters,
    obfuscate,
    obfuscate_gaussian,
    observed_pair_law,
    random_permutation,
)
from anonmatch.source_models import (
    THREE_STATE_TOPOLOGY,
    IidProfile,
    TraceMatrix,
    UserPopulation,
    generate_traces,
    sample_markov_profiles,
)


def constant_noise(n, level, a_n=None):
    return NoiseDraw(np.full(n, level), a_n or max(level, 1e-12))


def test_schedules():
    assert NoiseSchedule(1, 1.1).a(100) == pytest.approx(0.0063096, rel=1e-4)
    assert NoiseSchedule(1, 0.5).a(1) == 1.0
    assert NoiseSchedule(5, 0.5).a(4) == 1.0 and NoiseSchedule(5, 0.5).clamped(4)
    assert ObservationSchedule(1, 2.2).m(100) == 25119
    # c * n**eta is 10000 up to rounding; the ceiling must not jump to 10001.
    assert ObservationSchedule(1, 2).m(100) == 10_000
    assert ObservationSchedule(1e-9, 1).m(3) == 1


def test_noise_cap_must_be_positive():
    with pytest.raises(ValueError):
        draw_noise_levels(5, 0.0)
    with pytest.raises(ValueError):
        NoiseDraw(np.zeros(3), 0.0)


def test_noise_levels_uniform_mean():
    d = draw_noise_levels(100_000, 0.1, seed=1)
    assert abs(d.levels.mean() - 0.05) < 0.001
    assert d.levels.min() >= 0 and d.levels.max() <= 0.1


def test_noise_clamp_recorded():
    d = draw_noise_levels(4, NoiseSchedule(5, 0.5), seed=1)
    assert d.a_n == 1.0 and d.clamped
    assert d.to_record()["clamped"] is True


def test_noiseless_channel_is_identity():
    x = generate_traces(UserPopulation.from_probabilities([0.2, 0.7]), 100, seed=1)
    z = obfuscate(x, NoiseDraw(np.zeros(2), 0.1), seed=2)
    assert np.array_equal(z.values, x.values) and z.stage == "Z"


def test_binary_channel_law():
    x = generate_traces(UserPopulation.from_probabilities([0.3]), 400_000, seed=1)
    z = obfuscate(x, constant_noise(1, 0.1), seed=3)
    assert abs(z.values.mean() - 0.34) < 0.003


def test_ternary_channel_law():
    pop = UserPopulation("iid", np.array([[0.5, 0.2, 0.3]]))
    x = generate_traces(pop, 400_000, seed=1)
    z = obfuscate(x, constant_noise(1, 0.12), 3, seed=3)
    assert abs((z.values == 1).mean() - 0.224) < 0.003
    q = effective_parameters(IidProfile(np.array([0.5, 0.2, 0.3])), 0.12).q
    assert q[1] == pytest.approx(0.224)
    assert q.sum() == pytest.approx(1.0)


def test_flip_rate_per_user_within_four_sigma():
    levels = np.array([0.01, 0.1, 0.3])
    x = generate_traces(UserPopulation.from_probabilities([0.4, 0.4, 0.4]), 100_000, seed=4)
    z = obfuscate(x, NoiseDraw(levels, 0.3), seed=5)
    flips = (x.values != z.values).mean(axis=0)
    sigma = np.sqrt(levels * (1 - levels) / 100_000)
    assert np.all(np.abs(flips - levels) < 4 * sigma)


def test_regeneration_hook_changes_levels():
    x = generate_traces(UserPopulation.from_probabilities([0.5]), 40_000, seed=1)
    fixed = obfuscate(x, constant_noise(1, 0.0, 0.5), seed=2)
    regen = obfuscate(x, constant_noise(1, 0.0, 0.5), seed=2, regenerate_every=1000)
    assert np.array_equal(fixed.values, x.values)
    assert np.array_equal(regen.values[:1000], x.values[:1000])
    assert (regen.values != x.values).mean() > 0.1


def test_effective_parameters_examples():
    prof = IidProfile(np.array([0.7, 0.3]))
    assert effective_parameters(prof, 0.0).q == pytest.approx([0.7, 0.3])
    assert effective_parameters(prof, 0.1).q[1] == pytest.approx(0.34)
    half = IidProfile(np.array([0.5, 0.5]))
    for R in (0.0, 0.2, 0.9):
        assert effective_parameters(half, R).q[1] == pytest.approx(0.5)
    chain = sample_markov_profiles(1, THREE_STATE_TOPOLOGY, seed=1).profiles[0]
    assert effective_parameters(chain, 0.0).transition_error == 0.0
    assert effective_parameters(chain, 0.1).transition_error == pytest.approx(0.19)
    with pytest.raises(ValueError):
        effective_parameters(prof, 1.5)


@given(st.integers(2, 6), st.floats(0, 1))
def test_channel_rows_are_distributions(r, R):
    c = channel_matrix(r, R)
    assert np.allclose(c.sum(axis=1), 1.0)
    assert np.all(c >= 0)


def test_observed_pair_law_matches_simulation():
    pop = sample_markov_profiles(1, THREE_STATE_TOPOLOGY, seed=3)
    x = generate_traces(pop, 400_000, seed=3)
    z = obfuscate(x, constant_noise(1, 0.15), 3, seed=3).values[:, 0]
    law = observed_pair_law(pop.params[0], 0.15)[0]
    src, dst = z[:-1], z[1:]
    for i in range(3):
        for l in range(3):
            assert np.mean(dst[src == i] == l) == pytest.approx(law[i, l], abs=0.01)
    assert observed_pair_law(pop.params[0], 0.0)[0] == pytest.approx(pop.params[0], abs=1e-12)


def test_gaussian_obfuscation_moments():
    x = generate_traces(UserPopulation.from_probabilities([0.3, 0.3]), 400_000, seed=1)
    z = obfuscate_gaussian(x, NoiseDraw(np.array([1e-12, 0.04]), 0.04), seed=2)
    assert z.stage == "Z-real"
    assert np.allclose(z.values[:, 0], x.values[:, 0], atol=1e-4)
    assert z.values[:, 1].mean() == pytest.approx(0.3, abs=0.003)
    assert z.values[:, 1].var() == pytest.approx(0.21 + 0.04, abs=0.003)


def test_anonymize_examples():
    z = TraceMatrix(np.array([[0, 1, 2]]), "Z", r=3)  # columns A=0, B=1, C=2
    assert np.array_equal(anonymize(z, Permutation.identity(3)).values, z.values)
    perm = Permutation(np.array([1, 2, 0]))  # user 0 -> 1, 1 -> 2, 2 -> 0
    y = anonymize(z, perm)
    assert y.stage == "Y"
    assert y.values.tolist() == [[2, 0, 1]]  # (C, A, B)
    assert np.array_equal(deanonymize(y, perm).values, z.values)
    with pytest.raises(ValueError):
        anonymize(z, Permutation.identity(2))
    with pytest.raises(ValueError):
        Permutation(np.array([0, 0, 1]))


@given(st.integers(1, 30), st.integers(0, 2**31))
def test_anonymize_round_trip_preserves_columns(n, seed):
    rng = np.random.default_rng(seed)
    z = TraceMatrix(rng.integers(0, 2, (7, n)), "Z", r=2)
    perm = random_permutation(n, seed=seed)
    y = anonymize(z, perm)
    assert np.array_equal(perm.forward[perm.inverse], np.arange(n))
    assert sorted(map(tuple, y.values.T)) == sorted(map(tuple, z.values.T))
    assert np.array_equal(deanonymize(y, perm).values, z.values)


def test_obfuscate_rejects_wrong_stage():
    z = TraceMatrix(np.zeros((3, 2), dtype=int), "Z", r=2)
    with pytest.raises(ValueError):
        obfuscate(z, NoiseDraw(np.zeros(2), 0.1))
