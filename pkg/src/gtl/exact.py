"""Brute-force enumeration over tiny vocabularies and lengths.

Everything here works on explicit probability tables over clean sequences
(``N**L`` entries) and noisy sequences (``(N+1)**L`` entries, id N = MASK).
These routines serve as exact references for the learned components and as
drop-in exact models for the samplers.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np
import torch

from .diffusion import NoiseSchedule, true_posterior
from .numerics import DTYPE, safe_log


@lru_cache(maxsize=None)
def clean_states(n: int, length: int) -> np.ndarray:
    return np.array(list(itertools.product(range(n), repeat=length)), dtype=np.int64).reshape(-1, length)


@lru_cache(maxsize=None)
def noisy_states(n: int, length: int) -> np.ndarray:
    return np.array(list(itertools.product(range(n + 1), repeat=length)), dtype=np.int64).reshape(-1, length)


def state_index(z, n: int) -> int:
    """Index of a noisy sequence in :func:`noisy_states` (base N+1 digits)."""
    idx = 0
    for tok in z:
        idx = idx * (n + 1) + int(tok)
    return idx


def random_distribution(n: int, length: int, rng: np.random.Generator, concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(n ** length, concentration))


def _consistent(z, n: int, length: int) -> np.ndarray:
    xs = clean_states(n, length)
    z = np.asarray(z)
    observed = z != n
    return np.all((xs == z) | ~observed, axis=1)


def _likelihood(z, alpha: float, n: int) -> float:
    """p(z_t = z | x0) for any x0 consistent with z."""
    z = np.asarray(z)
    k = int(np.sum(z == n))
    return alpha ** (len(z) - k) * (1.0 - alpha) ** k


def marginal(p0: np.ndarray, z, alpha: float, n: int) -> float:
    """p_t(z) = sum_x0 p0(x0) p(z | x0)."""
    length = len(z)
    return float(p0[_consistent(z, n, length)].sum() * _likelihood(z, alpha, n))


def clean_posterior(p0: np.ndarray, z, alpha: float, n: int) -> np.ndarray:
    """p(x0 | z_t = z) over all clean sequences, via Bayes with the forward likelihood."""
    length = len(z)
    joint = p0 * _consistent(z, n, length) * _likelihood(z, alpha, n)
    total = joint.sum()
    if total <= 0:
        raise ValueError(f"state {list(z)} has zero probability")
    return joint / total


def exact_ratio_oracle(z, p0: np.ndarray, q0: np.ndarray, schedule: NoiseSchedule, t: float, n: int) -> float:
    """E_{x0 ~ p(.|z)}[q(x0)/p(x0)] by enumeration over clean sequences."""
    post = clean_posterior(p0, z, schedule.alpha(t), n)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(p0 > 0, q0 / p0, 0.0)
    return float(np.sum(post * w))


def marginal_ratio(z, p0: np.ndarray, q0: np.ndarray, alpha: float, n: int) -> float:
    """q_t(z) / p_t(z) computed from the two marginals directly."""
    pz = marginal(p0, z, alpha, n)
    if pz <= 0:
        raise ValueError(f"state {list(z)} has zero source probability")
    return marginal(q0, z, alpha, n) / pz


def position_conditionals(p0: np.ndarray, z, n: int) -> np.ndarray:
    """[L, N] table of p(x0[l] = v | unmasked tokens of z); the optimal denoiser output."""
    length = len(z)
    xs = clean_states(n, length)
    w = p0 * _consistent(z, n, length)
    total = w.sum()
    if total <= 0:
        raise ValueError(f"state {list(z)} has zero probability")
    out = np.zeros((length, n))
    for pos in range(length):
        out[pos] = np.bincount(xs[:, pos], weights=w, minlength=n) / total
    return out


# --- sequence-level reverse kernels ------------------------------------------------------------


def forward_prob(zs, zt, alpha_s: float, alpha_t: float, n: int) -> float:
    """p(z_t | z_s) for the absorbing forward process between times s < t."""
    keep = alpha_t / alpha_s
    prob = 1.0
    for a, b in zip(zs, zt):
        if a == n:
            prob *= 1.0 if b == n else 0.0
        elif b == n:
            prob *= 1.0 - keep
        else:
            prob *= keep if a == b else 0.0
    return prob


def reverse_kernel_bayes(p0: np.ndarray, zt, alpha_s: float, alpha_t: float, n: int) -> np.ndarray:
    """p(z_s | z_t) over all noisy states as p_s(z_s) p(z_t | z_s) / p_t(z_t)."""
    length = len(zt)
    pt = marginal(p0, zt, alpha_t, n)
    if pt <= 0:
        raise ValueError("conditioning state has zero probability")
    states = noisy_states(n, length)
    out = np.zeros(len(states))
    for i, zs in enumerate(states):
        f = forward_prob(zs, zt, alpha_s, alpha_t, n)
        if f > 0:
            out[i] = marginal(p0, zs, alpha_s, n) * f / pt
    return out


def reverse_kernel_posterior(p0: np.ndarray, zt, alpha_s: float, alpha_t: float, n: int) -> np.ndarray:
    """p(z_s | z_t) = sum_x0 p(x0 | z_t) prod_l p(z_s[l] | z_t[l], x0[l])."""
    length = len(zt)
    post = clean_posterior(p0, zt, alpha_t, n)
    xs = clean_states(n, length)
    states = noisy_states(n, length)
    out = np.zeros(len(states))
    for x, w in zip(xs, post):
        if w == 0:
            continue
        per_pos = [true_posterior(int(zt[l]), int(x[l]), alpha_s, alpha_t, n) for l in range(length)]
        joint = per_pos[0]
        for p in per_pos[1:]:
            joint = np.outer(joint, p).ravel()
        out += w * joint
    return out


def guided_kernel(source_row: np.ndarray, ratios: np.ndarray) -> np.ndarray:
    """Reweight a source reverse kernel by ratios of the next state and renormalize."""
    w = source_row * ratios
    total = w.sum()
    if total <= 0:
        raise ValueError("guided kernel has empty support")
    return w / total


def ratio_table(p0: np.ndarray, q0: np.ndarray, schedule: NoiseSchedule, t: float, n: int, length: int) -> np.ndarray:
    """exact_ratio_oracle over all noisy states (0 where the source marginal vanishes)."""
    out = np.zeros((n + 1) ** length)
    alpha = schedule.alpha(t)
    for i, z in enumerate(noisy_states(n, length)):
        if marginal(p0, z, alpha, n) > 0:
            out[i] = exact_ratio_oracle(z, p0, q0, schedule, t, n)
    return out


# --- factorized chains (what the per-position samplers implement) --------------------------------


def factorized_chain_terminal(p0: np.ndarray, grid: list[tuple[float, float, float]], n: int, length: int) -> np.ndarray:
    """Exact terminal distribution over clean sequences of the per-position ancestral chain
    driven by the optimal denoiser of ``p0``.

    ``grid`` holds (t, alpha_t, alpha_s) per step as produced by ``diffusion.time_grid``.
    """
    states = noisy_states(n, length)
    dist = np.zeros(len(states))
    dist[state_index([n] * length, n)] = 1.0
    for _, a_t, a_s in grid:
        p_mask = (1 - a_s) / (1 - a_t)
        nxt = np.zeros_like(dist)
        for i in np.nonzero(dist)[0]:
            z = states[i]
            cond = position_conditionals(p0, z, n)
            options = []
            for pos in range(length):
                if z[pos] != n:
                    options.append([(int(z[pos]), 1.0)])
                else:
                    opts = [(n, p_mask)] + [(v, (1 - p_mask) * cond[pos, v]) for v in range(n)]
                    options.append([o for o in opts if o[1] > 0])
            for combo in itertools.product(*options):
                prob = dist[i]
                for _, p in combo:
                    prob *= p
                nxt[state_index([c[0] for c in combo], n)] += prob
        dist = nxt
    clean_idx = [state_index(x, n) for x in clean_states(n, length)]
    return dist[clean_idx]


def empirical_distribution(samples: np.ndarray, n: int) -> np.ndarray:
    """Histogram of clean samples over ``clean_states`` order."""
    samples = np.asarray(samples)
    idx = np.zeros(len(samples), dtype=np.int64)
    for col in range(samples.shape[1]):
        idx = idx * n + samples[:, col]
    return np.bincount(idx, minlength=n ** samples.shape[1]) / len(samples)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# --- exact models with the sampler interfaces -----------------------------------------------------


def _table_index(z: torch.Tensor, n: int) -> torch.Tensor:
    weights = (n + 1) ** torch.arange(z.shape[-1] - 1, -1, -1)
    return (z * weights).sum(dim=-1)


class ExactDenoiser:
    """Optimal time-free denoiser for a known clean distribution (lookup table over noisy states)."""

    time_conditioned = False

    def __init__(self, p0: np.ndarray, n: int, length: int):
        self.p0, self.vocab_size, self.length = p0, n, length
        self.mask_id = n
        table = np.full(((n + 1) ** length, length, n), 1.0 / n)
        for i, z in enumerate(noisy_states(n, length)):
            if p0[_consistent(z, n, length)].sum() > 0:
                table[i] = position_conditionals(p0, z, n)
        self.table = safe_log(torch.from_numpy(table).to(DTYPE))

    def log_probs(self, z: torch.Tensor, sigma=None) -> torch.Tensor:
        return self.table[_table_index(z, self.vocab_size)]


class ExactRatio:
    """log q_t(z)/p_t(z); the forward factors cancel so the value is time-free."""

    def __init__(self, p0: np.ndarray, q0: np.ndarray, n: int, length: int):
        self.p0, self.q0, self.vocab_size, self.length = p0, q0, n, length
        table = np.full((n + 1) ** length, -1e30)
        for i, z in enumerate(noisy_states(n, length)):
            cons = _consistent(z, n, length)
            p, q = p0[cons].sum(), q0[cons].sum()
            if p > 0 and q > 0:
                table[i] = np.log(q / p)
        self.table = torch.from_numpy(table).to(DTYPE)

    def log_ratio(self, z: torch.Tensor, sigma=None) -> torch.Tensor:
        return self.table[_table_index(z, self.vocab_size)]
