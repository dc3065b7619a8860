"""Continuous-time view of masked diffusion at enumerable scale.

Rate matrices use the column convention: entry [y', y] is the rate of y -> y'.
Sequence-level generators allow single-position jumps only; the absorbing
forward rate is beta(t) = sigma'(t), so the CTMC marginals coincide with the
discrete-time schedule alpha_t = exp(-sigma(t)).
"""

from __future__ import annotations

import warnings

import numpy as np
import torch

from .diffusion import NoiseSchedule, corrupt, stratified_times
from .exact import clean_states, marginal, noisy_states, state_index
from .numerics import DTYPE


def forward_rate(schedule: NoiseSchedule, t: float, vocab_size: int) -> np.ndarray:
    """Per-position absorbing generator over ids [0, N]; every clean token jumps to MASK at rate beta(t)."""
    beta = schedule.dsigma(t)  # rejects t outside [0, 1]
    n = vocab_size
    rate = np.zeros((n + 1, n + 1))
    rate[n, :n] = beta
    rate[np.arange(n), np.arange(n)] = -beta
    return rate


def conserve(column: np.ndarray, y: int) -> np.ndarray:
    """Set the diagonal entry so the column sums to zero."""
    col = np.array(column, dtype=float)
    col[y] = 0.0
    col[y] = -col.sum()
    return col


def reverse_rate_from_score(score: np.ndarray, rate: np.ndarray, y: int) -> np.ndarray:
    """Column y of the reverse generator: score[y'] * R[y, y'] off the diagonal.

    ``score[y']`` approximates p_t(y') / p_t(y); it is only read where R[y, y'] > 0.
    """
    reach = rate[y, :] > 0
    reach[y] = False
    if np.any(np.asarray(score)[reach] <= 0):
        raise ValueError("concrete scores must be positive")
    col = np.zeros(rate.shape[0])
    col[reach] = np.asarray(score)[reach] * rate[y, reach]
    return conserve(col, y)


def guided_reverse_rate(base: np.ndarray, ratios: np.ndarray, y: int) -> np.ndarray:
    """Scale the off-diagonal of a reverse-rate column by r(y') / r(y)."""
    r = np.asarray(ratios, dtype=float)
    if np.any(r <= 0):
        raise ValueError("ratios must be positive")
    col = np.array(base, dtype=float)
    off = np.arange(len(col)) != y
    col[off] = col[off] * (r[off] / r[y])
    return conserve(col, y)


class EnumerableChain:
    """Sequence-level absorbing CTMC over all noisy sequences of length L."""

    def __init__(self, vocab_size: int, length: int, schedule: NoiseSchedule = NoiseSchedule()):
        self.vocab_size, self.length, self.schedule = vocab_size, length, schedule
        self.states = noisy_states(vocab_size, length)
        n = vocab_size
        src, dst = [], []  # forward masking jumps y -> y'
        for i, y in enumerate(self.states):
            for pos in np.nonzero(y != n)[0]:
                z = y.copy()
                z[pos] = n
                src.append(i)
                dst.append(state_index(z, n))
        self.jump_from, self.jump_to = np.array(src), np.array(dst)
        self.clean_index = np.array([state_index(x, n) for x in clean_states(n, length)])

    @property
    def size(self) -> int:
        return len(self.states)

    def forward_generator(self, t: float) -> np.ndarray:
        beta = self.schedule.dsigma(t)
        rate = np.zeros((self.size, self.size))
        rate[self.jump_to, self.jump_from] = beta
        rate[np.arange(self.size), np.arange(self.size)] = -rate.sum(axis=0)
        return rate

    def marginals(self, p0: np.ndarray, t: float) -> np.ndarray:
        """Noisy-state marginals at time t from clean distribution p0."""
        alpha = self.schedule.alpha(t)
        return np.array([marginal(p0, y, alpha, self.vocab_size) for y in self.states])

    def scores(self, marg: np.ndarray, y: int) -> np.ndarray:
        """Exact concrete score p_t(y') / p_t(y) for every y' (0 where undefined)."""
        if marg[y] <= 0:
            raise ValueError("state has zero probability")
        return marg / marg[y]

    def reverse_generator(self, marg: np.ndarray, t: float) -> np.ndarray:
        """Full reverse generator from exact marginals (columns with zero mass are left at 0)."""
        rate = self.forward_generator(t)
        out = np.zeros_like(rate)
        for y in np.nonzero(marg > 0)[0]:
            out[:, y] = reverse_rate_from_score(self.scores(marg, y), rate, y)
        return out

    def guided_generator(self, base: np.ndarray, ratios: np.ndarray, support: np.ndarray) -> np.ndarray:
        out = np.zeros_like(base)
        for y in np.nonzero(support)[0]:
            out[:, y] = guided_reverse_rate(base[:, y], ratios, y)
        return out

    def reverse_kernel(self, p0: np.ndarray, s: float, t: float) -> np.ndarray:
        """Exact reverse transition matrix K[y', y] = P(z_s = y' | z_t = y) for s < t."""
        a_s, a_t = self.schedule.alpha(s), self.schedule.alpha(t)
        keep = a_t / a_s
        ms, mt = self.marginals(p0, s), self.marginals(p0, t)
        n = self.vocab_size
        mask_s = self.states == n
        k = np.zeros((self.size, self.size))
        for j, y in enumerate(self.states):
            if mt[j] <= 0:
                continue
            # forward y' -> y: positions masked in y' stay masked; unmasked ones keep or mask
            ok = np.all(np.where(mask_s, y == n, (self.states == y) | (y == n)), axis=1)
            newly = (y == n) & ~mask_s
            f = np.where(ok, keep ** (~mask_s & ~newly).sum(axis=1) * (1 - keep) ** newly.sum(axis=1), 0.0)
            k[:, j] = ms * f / mt[j]
        return k


def expansion_residual(chain: EnumerableChain, p0: np.ndarray, q0: np.ndarray, t: float, dt: float) -> float:
    """max |K_target(dt) - I - dt * guided generator| over columns with target mass."""
    mp, mq = chain.marginals(p0, t), chain.marginals(q0, t)
    support = (mp > 0) & (mq > 0)
    ratios = np.where(support, mq / np.where(mp > 0, mp, 1.0), 1.0)
    guided = chain.guided_generator(chain.reverse_generator(mp, t), ratios, support)
    k = chain.reverse_kernel(q0, t - dt, t)
    resid = k - np.eye(chain.size) - dt * guided
    return float(np.abs(resid[:, support]).max())


# --- DWDSE ------------------------------------------------------------------------------------


def entropy_offset(a: torch.Tensor) -> torch.Tensor:
    """K(a) = a log a - a with K(0) = 0."""
    return torch.where(a > 0, a * torch.log(torch.where(a > 0, a, torch.ones_like(a))) - a, torch.zeros_like(a))


def score_entropy(log_s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """s - a log s + K(a) from log s; nonnegative with its minimum 0 at s = a."""
    return torch.exp(log_s) - a * log_s + entropy_offset(a)


def dwdse_terms(log_score: torch.Tensor, x0: torch.Tensor, zt: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor,
                mask_id: int) -> torch.Tensor:
    """Per-sequence sum over masked positions and tokens of beta * score entropy.

    For absorbing diffusion the true ratio of unmasking to v is alpha / (1 - alpha)
    when v is the clean token and 0 otherwise.
    """
    n = log_score.shape[-1]
    ratio = (alpha / (1 - alpha)).reshape(-1, 1, 1)
    a = torch.nn.functional.one_hot(x0, n).to(DTYPE) * ratio
    masked = (zt == mask_id).to(DTYPE)
    per_pos = score_entropy(log_score, a).sum(dim=-1)
    return beta.reshape(-1) * (per_pos * masked).sum(dim=-1)


def dwdse_loss(score_model, x0: torch.Tensor, schedule: NoiseSchedule, generator: torch.Generator | None = None,
               t: torch.Tensor | float | None = None) -> torch.Tensor:
    if t is None:
        t = stratified_times(x0.shape[0], generator)
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.dim() == 0:
        t = t.expand(x0.shape[0])
    sigma = schedule.sigma_t(t)
    alpha = torch.exp(-sigma)
    beta = sigma * schedule.log_span
    zt = corrupt(x0, t, schedule, score_model.mask_id, generator)
    log_score = score_model.log_score(zt, sigma if score_model.time_conditioned else None)
    return dwdse_terms(log_score, x0, zt, alpha, beta, score_model.mask_id).mean()


# --- Euler sampler ----------------------------------------------------------------------------


def euler_guided_sample(chain: EnumerableChain, p0: np.ndarray, q0: np.ndarray | None, steps: int, count: int,
                        seed: int = 0, t_end: float = 0.0) -> tuple[np.ndarray, dict]:
    """Euler-discretized reverse CTMC with exact source scores, guided by the exact ratio
    q_t/p_t (``q0=None`` disables guidance).

    Negative stay probabilities are clipped and the column renormalized; the last step
    forces every remaining MASK to be resolved from the guided clean posterior.
    Returns clean samples [count, L] and counters.
    """
    if steps < 1 or count < 1:
        raise ValueError("steps and count must be >= 1")
    rng = np.random.default_rng(seed)
    ts = np.linspace(1.0, t_end, steps + 1)
    state = np.full(count, state_index([chain.vocab_size] * chain.length, chain.vocab_size))
    clipped = 0
    for i in range(steps):
        t, dt = ts[i], ts[i] - ts[i + 1]
        mp = chain.marginals(p0, t)
        gen = chain.reverse_generator(mp, t)
        if q0 is not None:
            mq = chain.marginals(q0, t)
            support = (mp > 0) & (mq > 0)
            ratios = np.where(support, mq / np.where(mp > 0, mp, 1.0), 1.0)
            gen = chain.guided_generator(gen, ratios, mp > 0)
        kernel = np.eye(chain.size) + dt * gen
        neg = kernel < 0
        if neg.any():
            clipped += int(neg.sum())
            kernel = np.clip(kernel, 0.0, None)
            kernel /= kernel.sum(axis=0, keepdims=True)
        cdf = np.cumsum(kernel, axis=0)
        u = rng.random(count)
        state = np.minimum((cdf[:, state] <= u).sum(axis=0), chain.size - 1)
    # terminal forcing: resolve leftovers from the (guided) clean posterior
    dist = q0 if q0 is not None else p0
    clean = chain.states[chain.clean_index]
    n = chain.vocab_size
    out = chain.states[state].copy()
    left = np.nonzero((out == n).any(axis=1))[0]
    for k in left:
        y = out[k]
        cons = np.all((clean == y) | (y == n), axis=1)
        w = dist * cons
        out[k] = clean[rng.choice(len(clean), p=w / w.sum())]
    if clipped:
        warnings.warn(f"clipped {clipped} negative kernel entries", RuntimeWarning)
    return out, {"clipped": clipped, "forced": len(left), "steps": steps}
