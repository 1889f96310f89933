"""Linear variance schedule for the diffusion process.

All arithmetic is carried out in float64 regardless of the network precision;
``alpha_bar`` is a product of up to a few hundred terms.  Step indices are
1-based throughout (``t = 1 .. T``), matching how the sampler walks the chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step coefficients of a discrete diffusion chain.

    Arrays are stored 0-based (``beta[t - 1]`` is the value for step ``t``);
    use the accessor methods when working with step indices.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def _check(self, t: int) -> int:
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"step index {t} outside [1, {self.T}]")
        return int(t) - 1

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check(t)])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check(t)])

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product up to and including step ``t``; ``t = 0`` gives 1."""
        if int(t) == 0:
            return 1.0
        return float(self.alpha_bar[self._check(t)])

    def posterior_var_at(self, t: int) -> float:
        return float(self.posterior_var[self._check(t)])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return self.T == other.T and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("beta", "alpha", "alpha_bar", "posterior_var")
        )


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` (step 1) to ``beta_end`` (step T)."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError(f"betas must lie in (0, 1), got {beta_start}, {beta_end}")
    if beta_start > beta_end:
        raise ValueError(f"beta_start {beta_start} exceeds beta_end {beta_end}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    beta[0], beta[-1] = beta_start, beta_end
    alpha = 1.0 - beta
    alpha_bar = np.empty(T, dtype=np.float64)
    acc = 1.0
    for i in range(T):
        acc = acc * alpha[i]
        alpha_bar[i] = acc
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    for arr in (beta, alpha, alpha_bar, posterior_var):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar, posterior_var)


def sigma_at(s: NoiseSchedule, t: int) -> float:
    """Standard deviation of the noise injected by the reverse step at ``t``.

    Zero at ``t = 1``: the last step is deterministic.
    """
    return float(np.sqrt(s.posterior_var_at(t)))
