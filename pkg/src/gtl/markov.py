"""Synthetic Markov-chain domains: data generation, bigram transition estimates
and the column-averaged KL metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMOOTHING = 1e-8


def diagonal_matrix(n: int, diag: float) -> np.ndarray:
    """Column-stochastic matrix with ``diag`` on the diagonal, rest spread uniformly."""
    if not 0.0 <= diag <= 1.0:
        raise ValueError(f"diagonal mass {diag} outside [0, 1]")
    m = np.full((n, n), (1.0 - diag) / (n - 1))
    np.fill_diagonal(m, diag)
    return m


def check_stochastic(m: np.ndarray, name: str = "matrix") -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square")
    if np.any(m < 0) or not np.allclose(m.sum(axis=0), 1.0, atol=1e-12):
        raise ValueError(f"{name} must be column-stochastic")


@dataclass(frozen=True)
class MarkovSpec:
    vocab_size: int = 5
    length: int = 20
    diag_src: float = 0.1
    diag_tgt: float = 0.8

    def __post_init__(self):
        if self.vocab_size < 2 or self.length < 2:
            raise ValueError("need vocab_size >= 2 and length >= 2")
        for d in (self.diag_src, self.diag_tgt):
            if not 0.0 <= d <= 1.0:
                raise ValueError(f"diagonal mass {d} outside [0, 1]")

    @property
    def source(self) -> np.ndarray:
        return diagonal_matrix(self.vocab_size, self.diag_src)

    @property
    def target(self) -> np.ndarray:
        return diagonal_matrix(self.vocab_size, self.diag_tgt)

    def matrix(self, domain: str) -> np.ndarray:
        if domain == "source":
            return self.source
        if domain == "target":
            return self.target
        raise ValueError(f"unknown domain {domain!r}")


def sample_chain(matrix: np.ndarray, n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` sequences; uniform first token, next token drawn from the column of the previous one."""
    check_stochastic(matrix)
    if n < 1:
        raise ValueError("n must be >= 1")
    k = matrix.shape[0]
    cdf = np.cumsum(matrix, axis=0)
    cdf[-1] = 1.0
    out = np.empty((n, length), dtype=np.int64)
    out[:, 0] = rng.integers(0, k, size=n)
    u = rng.random((n, length - 1))
    for i in range(1, length):
        cols = cdf[:, out[:, i - 1]]  # [k, n]
        out[:, i] = (cols <= u[:, i - 1]).sum(axis=0)
    return np.minimum(out, k - 1)


def gen_sequences(spec: MarkovSpec, domain: str, n: int, rng: np.random.Generator) -> np.ndarray:
    return sample_chain(spec.matrix(domain), n, spec.length, rng)


@dataclass(frozen=True)
class TransitionEstimate:
    matrix: np.ndarray
    count_total: int


def transition_counts(sequences: np.ndarray, n_states: int) -> np.ndarray:
    seqs = np.asarray(sequences)
    counts = np.zeros((n_states, n_states))
    np.add.at(counts, (seqs[:, 1:].ravel(), seqs[:, :-1].ravel()), 1.0)
    return counts


def estimate_transition(sequences, n_states: int, eps: float = SMOOTHING) -> TransitionEstimate:
    """Column-normalized bigram counts (entry [next, prev]) with additive smoothing."""
    seqs = np.asarray(sequences)
    if seqs.size == 0 or seqs.ndim != 2:
        raise ValueError("need a non-empty [n, L] array of sequences")
    if seqs.shape[1] < 2:
        raise ValueError("sequences must have length >= 2")
    if seqs.min() < 0 or seqs.max() >= n_states:
        raise ValueError("sequences contain ids outside the vocabulary (mask tokens?)")
    counts = transition_counts(seqs, n_states)
    est = (counts + eps) / (counts.sum(axis=0, keepdims=True) + n_states * eps)
    return TransitionEstimate(est, int(counts.sum()))


def transition_kl(true_matrix: np.ndarray, estimate) -> float:
    """(1/N) * sum_j KL(true[:, j] || est[:, j]); 0 log 0 = 0."""
    est = estimate.matrix if isinstance(estimate, TransitionEstimate) else np.asarray(estimate)
    p = np.asarray(true_matrix, dtype=float)
    if p.shape != est.shape:
        raise ValueError("shape mismatch")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(est)), 0.0)
    return float(terms.sum(axis=0).mean())


def stationary_distribution(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(matrix)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return v / v.sum()
