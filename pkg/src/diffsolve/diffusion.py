"""Forward corruption, posteriors, and reverse sampling for binary vectors.

Two formulations over x in {0,1}^N:

* Discrete: a two-state Markov chain per variable. The one-step kernel is
  the symmetric matrix Q_t = [[1-b_t, b_t], [b_t, 1-b_t]]; the cumulative
  kernel Qbar_t = Q_1 ... Q_t gives the t-step marginal, and Bayes' rule
  gives the posterior of an earlier state given a later one. Skipped-step
  sampling uses the range kernel Qbar_{t', t} = Q_{t'+1} ... Q_t, so the
  same code path serves adjacent steps (t' = t-1) and larger hops.

* Continuous: bits are rescaled to {-1, +1} and diffused with Gaussian
  noise; the marginal is N(sqrt(abar_t) x0, (1 - abar_t) I). Reverse steps
  reconstruct x0 from a predicted noise and either take the deterministic
  skip step ("ddim") or sample the closed-form Gaussian posterior ("ddpm").

All symmetric kernels here are parameterized by their off-diagonal mass g:
Q(g) = [[1-g, g], [g, 1-g]], whose nontrivial eigenvalue is 1 - 2g. Products
of such kernels multiply eigenvalues, which is how range kernels are formed
without matrix chains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DegenerateChainError(ArithmeticError):
    """A posterior denominator underflowed to zero."""


def _sym_kernel(g) -> np.ndarray:
    """2x2 symmetric stochastic matrix with off-diagonal mass g."""
    g = np.asarray(g, dtype=float)
    return np.stack(
        [np.stack([1.0 - g, g], axis=-1), np.stack([g, 1.0 - g], axis=-1)],
        axis=-2,
    )


@dataclass(eq=False)
class NoiseSchedule:
    """Per-step corruption ratios and every derived quantity, 1-indexed.

    Index 0 of each array is the identity step (beta=0, abar=1, Q=I) so that
    t-indexed lookups match the math directly.
    """

    T: int
    beta: np.ndarray        # (T+1,), beta[0] = 0
    alpha: np.ndarray       # (T+1,), alpha[t] = 1 - beta[t]
    alpha_bar: np.ndarray   # (T+1,), running product of alpha
    Q: np.ndarray           # (T+1, 2, 2), Q[0] = I
    Qbar: np.ndarray        # (T+1, 2, 2), running matrix product

    def transition_range(self, t_prev: int, t: int) -> np.ndarray:
        """Range kernel Q_{t_prev+1} ... Q_t (identity when t_prev == t)."""
        if not (0 <= t_prev <= t <= self.T):
            raise ValueError(f"need 0 <= t_prev <= t <= T, got ({t_prev}, {t})")
        lam = np.prod(1.0 - 2.0 * self.beta[t_prev + 1: t + 1])
        return _sym_kernel(0.5 * (1.0 - lam))


def make_noise_schedule(T: int, beta1: float, betaT: float) -> NoiseSchedule:
    """Linear schedule from beta1 to betaT inclusive, everything precomputed."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta1 <= betaT < 1.0):
        raise ValueError(f"need 0 < beta1 <= betaT < 1, got ({beta1}, {betaT})")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta1, betaT, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    Q = _sym_kernel(beta)
    Qbar = np.empty_like(Q)
    Qbar[0] = np.eye(2)
    for t in range(1, T + 1):
        Qbar[t] = Qbar[t - 1] @ Q[t]
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         Q=Q, Qbar=Qbar)


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not (1 <= t <= sched.T):
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")


def discrete_forward_marginal(x0: np.ndarray, t: int,
                              sched: NoiseSchedule) -> np.ndarray:
    """Per-variable rows [P(x_t=0), P(x_t=1)] of the t-step marginal."""
    _check_t(t, sched)
    x0 = np.asarray(x0, dtype=np.int64)
    return sched.Qbar[t][x0]


def discrete_forward_sample(x0: np.ndarray, t: int, sched: NoiseSchedule,
                            rng: np.random.Generator) -> np.ndarray:
    """Draw x_t from the t-step marginal, independently per variable."""
    probs = discrete_forward_marginal(x0, t, sched)
    return (rng.random(probs.shape[0]) < probs[:, 1]).astype(np.int64)


def discrete_posterior(x_t: np.ndarray, x0_probs: np.ndarray, t_prev: int,
                       t: int, sched: NoiseSchedule) -> np.ndarray:
    """Rows [P(x_{t_prev}=0), P(x_{t_prev}=1)] given x_t and a belief on x0.

    Mixes the exact two-state Bayes posterior q(x_{t_prev} | x_t, x0) over the
    given x0 distribution. Works for any 0 <= t_prev < t via the range kernel.
    """
    if not (0 <= t_prev < t):
        raise ValueError(f"need 0 <= t_prev < t, got ({t_prev}, {t})")
    _check_t(t, sched)
    x_t = np.asarray(x_t, dtype=np.int64)
    x0_probs = np.asarray(x0_probs, dtype=float)
    if x0_probs.shape != (x_t.shape[0], 2):
        raise ValueError(f"x0_probs must be (N, 2), got {x0_probs.shape}")

    q_range = sched.transition_range(t_prev, t)   # [k, j]: k at t_prev -> j at t
    q_prev = sched.Qbar[t_prev]                   # [i, k]: x0=i -> k at t_prev
    q_full = sched.Qbar[t]                        # [i, j]: x0=i -> j at t

    denom = q_full[:, x_t]                        # (2, N): q(x_t | x0=i)
    if np.any(denom == 0.0):
        raise DegenerateChainError(
            "q(x_t | x0) underflowed to zero; the chain is degenerate"
        )
    # per x0=i: q(x_{t_prev}=k | x_t, x0=i) = range[k, x_t] * prev[i, k] / denom
    like = q_range[:, x_t].T                      # (N, 2): [v, k]
    mix = x0_probs / denom.T                      # (N, 2): weight per x0 state
    post = like * (mix @ q_prev)                  # (N, 2)
    return post / post.sum(axis=1, keepdims=True)


def discrete_reverse_step(x_t: np.ndarray, x0_probs: np.ndarray, t_prev: int,
                          t: int, sched: NoiseSchedule,
                          rng: np.random.Generator | None = None,
                          mode: str = "sample") -> np.ndarray:
    """Draw (or argmax) x_{t_prev} from the mixed posterior.

    With ``mode="argmax"`` a tied posterior resolves to 0.
    """
    post = discrete_posterior(x_t, x0_probs, t_prev, t, sched)
    if mode == "argmax":
        return (post[:, 1] > post[:, 0]).astype(np.int64)
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        return (rng.random(post.shape[0]) < post[:, 1]).astype(np.int64)
    raise ValueError(f"unknown mode {mode!r}")


def rescale(x0: np.ndarray) -> np.ndarray:
    """Map bits {0, 1} to the signed domain {-1, +1}."""
    return 2.0 * np.asarray(x0, dtype=float) - 1.0


def quantize(x_hat0: np.ndarray) -> np.ndarray:
    """Threshold at the signed-domain midpoint: 1 iff the entry is >= 0."""
    return (np.asarray(x_hat0, dtype=float) >= 0.0).astype(np.int64)


def continuous_forward_sample(x0: np.ndarray, t: int, sched: NoiseSchedule,
                              rng: np.random.Generator
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Sample x_hat_t = sqrt(abar_t) x_hat0 + sqrt(1-abar_t) eps.

    Returns (x_hat_t, eps); eps is the regression target during training.
    """
    _check_t(t, sched)
    x_hat0 = rescale(x0)
    eps = rng.standard_normal(x_hat0.shape[0])
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x_hat0 + math.sqrt(1.0 - ab) * eps, eps


def reconstruct_x0(x_hat_t: np.ndarray, pred_eps: np.ndarray, t: int,
                   sched: NoiseSchedule) -> np.ndarray:
    """Invert the forward marginal using a noise estimate."""
    ab = sched.alpha_bar[t]
    if ab == 0.0:
        raise ZeroDivisionError("alpha_bar underflowed to zero at this step")
    return (x_hat_t - math.sqrt(1.0 - ab) * pred_eps) / math.sqrt(ab)


def continuous_reverse_step(x_hat_t: np.ndarray, pred_eps: np.ndarray,
                            t_prev: int, t: int, sched: NoiseSchedule,
                            mode: str = "ddim",
                            rng: np.random.Generator | None = None
                            ) -> np.ndarray:
    """One reverse hop t -> t_prev in the signed continuous domain.

    ddim: deterministic step sqrt(abar_{t'}) x0_hat + sqrt(1-abar_{t'}) eps.
    ddpm: sample the closed-form Gaussian posterior q(x_{t'} | x_t, x0_hat);
    the textbook adjacent-step form is the special case t' = t - 1.
    """
    if not (0 <= t_prev < t):
        raise ValueError(f"need 0 <= t_prev < t, got ({t_prev}, {t})")
    _check_t(t, sched)
    x0_hat = reconstruct_x0(x_hat_t, pred_eps, t, sched)
    ab_prev = sched.alpha_bar[t_prev]
    if mode == "ddim":
        return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * pred_eps
    if mode == "ddpm":
        if rng is None:
            raise ValueError("ddpm mode needs an rng")
        ab_t = sched.alpha_bar[t]
        a_range = ab_t / ab_prev  # signal retained between t_prev and t
        denom = 1.0 - ab_t
        mean = (
            math.sqrt(a_range) * (1.0 - ab_prev) * x_hat_t
            + math.sqrt(ab_prev) * (1.0 - a_range) * x0_hat
        ) / denom
        var = (1.0 - ab_prev) * (1.0 - a_range) / denom
        return mean + math.sqrt(max(var, 0.0)) * rng.standard_normal(mean.shape)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(eq=False)
class InferenceSchedule:
    """Strictly increasing timesteps visited during denoising, ending at T.

    The reverse walk visits tau[M-1] -> ... -> tau[0] -> 0.
    """

    tau: np.ndarray  # (M,) int64, strictly increasing, tau[-1] == T
    kind: str

    @property
    def M(self) -> int:
        return int(self.tau.shape[0])

    def hops(self) -> list[tuple[int, int]]:
        """(t, t_prev) pairs from T down to 0."""
        ts = [0] + [int(t) for t in self.tau]
        return [(ts[i], ts[i - 1]) for i in range(len(ts) - 1, 0, -1)]


def make_inference_schedule(M: int, T: int, kind: str = "linear"
                            ) -> InferenceSchedule:
    """Linear or cosine-spaced subsequence of [1..T] with at most M entries.

    linear: tau_i = round(i * T / M); cosine: tau_i = floor(cos((1 - i/M) *
    pi/2) * T), clamped to >= 1 and deduplicated. M = T yields the full
    schedule for both kinds. Cosine spends more of its steps near t = 0.
    """
    if not (1 <= M <= T):
        raise ValueError(f"need 1 <= M <= T, got M={M}, T={T}")
    if kind not in ("linear", "cosine"):
        raise ValueError(f"unknown schedule kind {kind!r}")
    if M == T:
        tau = np.arange(1, T + 1, dtype=np.int64)
    elif kind == "linear":
        tau = np.rint(np.arange(1, M + 1) * (T / M)).astype(np.int64)
    else:
        i = np.arange(1, M + 1)
        tau = np.floor(np.cos((1.0 - i / M) * math.pi / 2.0) * T).astype(np.int64)
        tau = np.maximum(tau, 1)
        tau = np.unique(tau)  # sorted and deduplicated
    if tau[-1] != T or np.any(np.diff(tau) <= 0) or tau[0] < 1:
        raise AssertionError(f"malformed inference schedule {tau}")
    return InferenceSchedule(tau=tau, kind=kind)
