"""Bernoulli forward noising, reverse-path sampling, and exact path likelihoods.

A path batch stores states for every diffusion time t = 0..T. Generation runs
in reverse time (t = T down to 0): the terminal state X_T is uniform and each
X_{t-1} is drawn from the factorized Bernoulli policy. `step_logq[:, t-1]`
holds log q(X_{t-1} | X_t), so the joint reverse log-likelihood is
`prior_logq + step_logq.sum(axis=1)`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .energies import BoltzmannTarget

__all__ = [
    "NoiseSchedule",
    "PathBatch",
    "exp_schedule",
    "forward_kernel_logprob",
    "sample_forward_path",
    "stationary_logprob",
    "sample_reverse_path",
    "path_log_q",
    "path_log_p_hat",
    "bernoulli_logpmf",
]

PROB_CLIP = 1e-7  # policy outputs are clipped to [PROB_CLIP, 1 - PROB_CLIP] before log


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step flip probabilities beta_1..beta_T of the forward process."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        if len(betas) < 1:
            raise ValueError("schedule needs at least one step")
        if (betas <= 0).any() or (betas > 0.5).any():
            raise ValueError("flip probabilities must lie in (0, 0.5]")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        """beta_t for t in 1..T."""
        if not 1 <= t <= self.n_steps:
            raise ValueError(f"t must be in 1..{self.n_steps}")
        return float(self.betas[t - 1])


def exp_schedule(n_steps: int) -> NoiseSchedule:
    """Exponential schedule beta_t = 0.5 * exp(-k*(1 - t/T)) with k = 6*ln2,
    ending at 0.5. Written as 0.5 * 2^(-6*(1 - t/T)) so the dyadic values
    (t = T, T/2) come out exact."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    t = np.arange(1, n_steps + 1, dtype=np.float64)
    return NoiseSchedule(0.5 * np.exp2(-6.0 * (1.0 - t / n_steps)))


@dataclass
class PathBatch:
    """A batch of diffusion paths with their exact sampling log-probabilities."""

    states: np.ndarray  # (M, T+1, N) int8, axis 1 indexed by diffusion time t
    step_logq: np.ndarray  # (M, T), [:, t-1] = log q(X_{t-1} | X_t)
    prior_logq: np.ndarray  # (M,), log q(X_T)

    def __post_init__(self):
        m, t1, _ = self.states.shape
        if self.step_logq.shape != (m, t1 - 1):
            raise ValueError("step_logq shape does not match states")
        if self.prior_logq.shape != (m,):
            raise ValueError("prior_logq shape does not match states")
        if not (np.isfinite(self.step_logq).all() and np.isfinite(self.prior_logq).all()):
            raise ValueError("path log-probabilities must be finite")

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def n_bits(self) -> int:
        return self.states.shape[2]

    @property
    def x0(self) -> np.ndarray:
        return self.states[:, 0, :]

    @property
    def x_final(self) -> np.ndarray:
        return self.states[:, -1, :]

    @property
    def log_q(self) -> np.ndarray:
        """Joint reverse log-likelihood log q(X_{0:T}) per path."""
        return self.prior_logq + self.step_logq.sum(axis=1)

    def select(self, idx) -> "PathBatch":
        return PathBatch(self.states[idx], self.step_logq[idx], self.prior_logq[idx])

    def to_npz(self, path) -> None:
        m, t1, n = self.states.shape
        np.savez_compressed(
            path,
            version=1,
            shape=np.array([m, t1, n], dtype=np.int64),
            packed=np.packbits(self.states.astype(np.uint8), axis=-1),
            step_logq=self.step_logq,
            prior_logq=self.prior_logq,
        )

    @classmethod
    def from_npz(cls, path) -> "PathBatch":
        with np.load(path) as blob:
            m, t1, n = blob["shape"]
            states = np.unpackbits(blob["packed"], axis=-1)[..., :n].astype(np.int8)
            return cls(states.reshape(m, t1, n), blob["step_logq"], blob["prior_logq"])


def bernoulli_logpmf(bits, probs) -> np.ndarray:
    """Sum over the last axis of log Bernoulli(bits; probs)."""
    bits = np.asarray(bits, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    return (bits * np.log(probs) + (1.0 - bits) * np.log1p(-probs)).sum(axis=-1)


def forward_kernel_logprob(x_t, x_prev, beta_t: float) -> np.ndarray:
    """log p(X_t | X_{t-1}) of the factorized flip kernel with rate beta_t."""
    if not 0.0 < beta_t <= 0.5:
        raise ValueError("beta_t must be in (0, 0.5]")
    x_t = np.asarray(x_t)
    x_prev = np.asarray(x_prev)
    if x_t.shape[-1] != x_prev.shape[-1]:
        raise ValueError("state dimensions differ")
    flips = (x_t != x_prev).sum(axis=-1).astype(np.float64)
    n = x_t.shape[-1]
    return flips * math.log(beta_t) + (n - flips) * math.log1p(-beta_t)


def sample_forward_path(schedule: NoiseSchedule, x0, rng) -> tuple[np.ndarray, np.ndarray]:
    """Noise x0 forward through the schedule.

    Returns (states, logp) with states of shape (M, T+1, N), states[:, 0] = x0,
    and logp the exact log p(X_{1:T} | X_0) of the drawn trajectory.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.int8))
    m, n = x0.shape
    t_steps = schedule.n_steps
    states = np.empty((m, t_steps + 1, n), dtype=np.int8)
    states[:, 0] = x0
    logp = np.zeros(m)
    for t in range(1, t_steps + 1):
        beta = schedule.beta(t)
        flip = rng.random((m, n)) < beta
        states[:, t] = np.where(flip, 1 - states[:, t - 1], states[:, t - 1])
        logp += forward_kernel_logprob(states[:, t], states[:, t - 1], beta)
    return states, logp


def stationary_logprob(x) -> np.ndarray:
    """log probability of x under the uniform stationary distribution."""
    x = np.asarray(x)
    n = x.shape[-1]
    return np.full(x.shape[:-1], n * math.log(0.5))


def _checked_probs(policy, x_t, t, condition):
    probs = np.asarray(policy.probs(x_t, t, condition), dtype=np.float64)
    if probs.shape != x_t.shape:
        raise ValueError(f"policy returned shape {probs.shape}, expected {x_t.shape}")
    if (probs <= 0).any() or (probs >= 1).any():
        raise ValueError("policy emitted a probability outside (0, 1)")
    return probs


def sample_reverse_path(
    policy, schedule: NoiseSchedule, n_paths: int, rng, condition=None
) -> PathBatch:
    """Draw paths from the reverse process: X_T uniform, then X_{t-1} ~ policy."""
    n = policy.n_bits if condition is None else condition.n_bits
    t_steps = schedule.n_steps
    states = np.empty((n_paths, t_steps + 1, n), dtype=np.int8)
    step_logq = np.empty((n_paths, t_steps))
    states[:, t_steps] = rng.integers(0, 2, size=(n_paths, n), dtype=np.int8)
    for t in range(t_steps, 0, -1):
        probs = _checked_probs(policy, states[:, t], t, condition)
        bits = (rng.random((n_paths, n)) < probs).astype(np.int8)
        states[:, t - 1] = bits
        step_logq[:, t - 1] = bernoulli_logpmf(bits, probs)
    prior = stationary_logprob(states[:, t_steps])
    return PathBatch(states, step_logq, prior)


def path_log_q(policy, path: PathBatch, condition=None) -> np.ndarray:
    """Teacher-forced joint reverse log-likelihood of stored paths under `policy`."""
    t_steps = path.n_steps
    total = stationary_logprob(path.states[:, t_steps])
    for t in range(t_steps, 0, -1):
        probs = _checked_probs(policy, path.states[:, t], t, condition)
        total = total + bernoulli_logpmf(path.states[:, t - 1], probs)
    return total


def path_log_p_hat(target: BoltzmannTarget, schedule: NoiseSchedule, path: PathBatch) -> np.ndarray:
    """log of the unnormalized forward path weight:
    -beta*H(X_0) + sum_t log p(X_t | X_{t-1}). No term for X_T's stationary
    density: with that convention the importance ratio p_hat/q keeps the
    model's prior log-probability in the denominator."""
    if path.n_steps != schedule.n_steps:
        raise ValueError("path and schedule disagree on the number of steps")
    total = target.log_unnormalized(path.x0)
    for t in range(1, path.n_steps + 1):
        total = total + forward_kernel_logprob(
            path.states[:, t], path.states[:, t - 1], schedule.beta(t)
        )
    return total
