import math

import numpy as np
import pytest

from gtl.markov import (MarkovSpec, check_stochastic, diagonal_matrix, estimate_transition, gen_sequences,
                        sample_chain, stationary_distribution, transition_kl)


def test_diagonal_matrix_columns_stochastic():
    m = diagonal_matrix(5, 0.8)
    check_stochastic(m)
    assert np.allclose(np.diag(m), 0.8)
    assert np.allclose(m[1, 0], 0.05)


def test_spec_rejects_bad_diagonal():
    with pytest.raises(ValueError):
        MarkovSpec(diag_tgt=1.2)


def test_identity_chain_is_constant():
    seqs = sample_chain(np.eye(4), 200, 12, np.random.default_rng(0))
    assert np.all(seqs == seqs[:, :1])


def test_uniform_chain_estimate_is_uniform():
    seqs = sample_chain(np.full((5, 5), 0.2), 100_000 // 19 + 1, 20, np.random.default_rng(1))
    est = estimate_transition(seqs, 5).matrix
    assert np.abs(est - 0.2).max() < 0.01


def test_estimate_recovers_target_matrix():
    spec = MarkovSpec()
    seqs = gen_sequences(spec, "target", 100_000, np.random.default_rng(2))
    est = estimate_transition(seqs, 5)
    assert np.abs(est.matrix - spec.target).max() < 0.01
    assert est.count_total == 100_000 * 19


def test_first_token_uniform_and_length():
    seqs = gen_sequences(MarkovSpec(), "source", 50_000, np.random.default_rng(3))
    assert seqs.shape == (50_000, 20)
    freq = np.bincount(seqs[:, 0], minlength=5) / len(seqs)
    assert np.abs(freq - 0.2).max() < 0.01


def test_single_sequence_point_mass():
    est = estimate_transition(np.array([[0, 0, 0]]), 3).matrix
    assert est[0, 0] == pytest.approx(1.0, abs=1e-7)
    assert np.allclose(est.sum(axis=0), 1.0)


def test_estimate_rejects_empty_and_masks():
    with pytest.raises(ValueError):
        estimate_transition(np.zeros((0, 5), dtype=int), 5)
    with pytest.raises(ValueError):
        estimate_transition(np.array([[0, 5, 1]]), 5)


def test_split_half_stability():
    seqs = gen_sequences(MarkovSpec(), "target", 40_000, np.random.default_rng(4))
    a = estimate_transition(seqs[:20_000], 5).matrix
    b = estimate_transition(seqs[20_000:], 5).matrix
    assert np.abs(a - b).max() < 0.02


def test_kl_zero_on_identical():
    m = diagonal_matrix(5, 0.3)
    assert transition_kl(m, m) == 0.0


def test_kl_point_mass_vs_uniform_column():
    assert transition_kl(np.array([[1.0], [0.0]]), np.array([[0.5], [0.5]])) == pytest.approx(math.log(2), abs=1e-15)


def test_kl_hand_two_by_two():
    true = np.array([[0.9, 0.2], [0.1, 0.8]])
    est = np.array([[0.7, 0.4], [0.3, 0.6]])
    col0 = 0.9 * math.log(0.9 / 0.7) + 0.1 * math.log(0.1 / 0.3)
    col1 = 0.2 * math.log(0.2 / 0.4) + 0.8 * math.log(0.8 / 0.6)
    assert transition_kl(true, est) == pytest.approx((col0 + col1) / 2, abs=1e-12)


def test_kl_positive_when_different():
    assert transition_kl(diagonal_matrix(5, 0.8), diagonal_matrix(5, 0.79)) > 0


def test_last_token_marginal_matches_stationary():
    m = np.array([[0.6, 0.3, 0.1], [0.3, 0.3, 0.2], [0.1, 0.4, 0.7]])
    seqs = sample_chain(m, 100_000, 20, np.random.default_rng(5))
    freq = np.bincount(seqs[:, 19], minlength=3) / len(seqs)
    pi = stationary_distribution(m)
    assert np.allclose(m @ pi, pi)
    assert 0.5 * np.abs(freq - pi).sum() < 0.02
