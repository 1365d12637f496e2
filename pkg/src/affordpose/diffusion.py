"""DDPM machinery in x0-prediction form.

Steps are 1-indexed: ``t`` runs 1..T and ``schedule.alpha_bar[t - 1]`` is
the cumulative product up to step t.  All randomness is supplied by the
caller, either as explicit noise or as a seed.
"""

from dataclasses import dataclass

import numpy as np

POSE_DIM = 45


class SamplingDivergedError(RuntimeError):
    def __init__(self, step):
        super().__init__(f"denoiser returned non-finite values at step {step}")
        self.step = step


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_variance: np.ndarray
    beta_start: float
    beta_end: float

    def alpha_bar_prev(self, t):
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def check_step(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"diffusion step {t} outside [1, {self.T}]")


def make_schedule(T=1000, beta_start=1e-4, beta_end=2e-2):
    """Linear beta schedule with fixed (posterior) reverse variances."""
    T = int(T)
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([float(beta_start)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    post_var = beta * (1.0 - prev) / (1.0 - alpha_bar)
    return DiffusionSchedule(T, beta, alpha, alpha_bar, np.maximum(post_var, 0.0),
                             float(beta_start), float(beta_end))


def q_sample(x0, t, noise, sched):
    sched.check_step(t)
    ab = sched.alpha_bar[t - 1]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(noise)


def posterior_coefficients(t, sched):
    """(coef on x0, coef on x_t, sigma) of q(x_{t-1} | x_t, x0)."""
    sched.check_step(t)
    ab = sched.alpha_bar[t - 1]
    ab_prev = sched.alpha_bar_prev(t)
    beta = sched.beta[t - 1]
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(sched.alpha[t - 1]) * (1.0 - ab_prev) / (1.0 - ab)
    return c0, ct, float(np.sqrt(sched.posterior_variance[t - 1]))


def posterior_step(xhat0, x_t, t, sched, noise):
    c0, ct, sigma = posterior_coefficients(t, sched)
    mean = c0 * np.asarray(xhat0) + ct * np.asarray(x_t)
    if t == 1:
        return mean
    return mean + sigma * np.asarray(noise)


def sample(denoiser, cond, sched, start=None, guidance=None, seed=0, dim=POSE_DIM, post_x0=None):
    """Reverse diffusion from ``start = (x_n, n)`` or from pure noise at T.

    ``denoiser(x_t, t, cond)`` returns x0 estimates.  ``guidance(xhat0, t)``
    may adjust each estimate before the posterior step, and ``post_x0``
    (same signature) runs after guidance; refinement uses it for inpainting.
    One standard-normal draw per step keeps runs with and without hooks
    aligned.
    """
    rng = np.random.default_rng(seed)
    if start is None:
        n = sched.T
        x = rng.standard_normal(dim)
    else:
        x, n = start
        x = np.array(x, dtype=np.float64)
        if not 1 <= n <= sched.T:
            raise ValueError(f"start step {n} outside [1, {sched.T}]")
    for t in range(n, 0, -1):
        xhat0 = np.asarray(denoiser(x, t, cond), dtype=np.float64)
        if not np.all(np.isfinite(xhat0)):
            raise SamplingDivergedError(t)
        if guidance is not None:
            xhat0 = guidance(xhat0, t)
        if post_x0 is not None:
            xhat0 = post_x0(xhat0, t)
        x = posterior_step(xhat0, x, t, sched, rng.standard_normal(x.shape))
    return x
