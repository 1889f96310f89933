"""Forward noising, the noise-prediction objective and ancestral sampling.

Images live in [0, 1] outside this module.  The chain itself runs in "model
space" [-1, 1]; :func:`to_model_space` / :func:`from_model_space` convert.
Tensors are ``(N, 1, H, W)``; a bare ``(H, W)`` grid is accepted where noted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .schedule import NoiseSchedule, sigma_at

EpsModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class DiffusionSample:
    x_t: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor


def to_model_space(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


def from_model_space(x: torch.Tensor) -> torch.Tensor:
    return (x.clamp(-1.0, 1.0) + 1.0) / 2.0


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    if x.dim() != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (H, W) or (N, 1, H, W) grid, got shape {tuple(x.shape)}")
    return x


def _steps(t, n: int, T: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(n)
    if t.shape != (n,):
        raise ValueError(f"need one step index per batch item ({n}), got shape {tuple(t.shape)}")
    if int(t.min()) < 1 or int(t.max()) > T:
        raise ValueError(f"step indices must lie in [1, {T}]")
    return t


def _coef(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    c = torch.from_numpy(np.asarray(values, dtype=np.float64)[t.numpy() - 1])
    return c.to(like.dtype).view(-1, 1, 1, 1)


def forward_noise(
    x0: torch.Tensor,
    t,
    s: NoiseSchedule,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
) -> DiffusionSample:
    """Jump straight to step ``t``: ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.

    ``x0`` is expected in model space.  ``t`` may be a scalar or one index per
    batch item.  Pass ``eps`` to freeze the noise draw.
    """
    x0 = _as_batch(x0)
    t = _steps(t, x0.shape[0], s.T)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    elif eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match image {tuple(x0.shape)}")
    ab = _coef(s.alpha_bar, t, x0)
    x_t = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    return DiffusionSample(x_t=x_t, t=t, eps=eps)


def training_loss(
    model: EpsModel,
    x0: torch.Tensor,
    cond: torch.Tensor,
    s: NoiseSchedule,
    generator: torch.Generator | None = None,
    t=None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """MSE between the drawn noise and the model's prediction of it.

    ``x0`` is in [0, 1].  One step is drawn uniformly per example unless ``t``
    is given; ``t`` and ``eps`` together freeze the stochastic draw.
    """
    x0 = _as_batch(x0)
    cond = _as_batch(cond).to(x0.dtype)
    if cond.shape != x0.shape:
        raise ValueError(f"condition shape {tuple(cond.shape)} != image shape {tuple(x0.shape)}")
    if t is None:
        t = torch.randint(1, s.T + 1, (x0.shape[0],), generator=generator)
    d = forward_noise(to_model_space(x0), t, s, generator=generator, eps=eps)
    eps_hat = model(d.x_t, cond, d.t)
    return torch.mean((eps_hat - d.eps) ** 2)


def reverse_step(
    x_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    s: NoiseSchedule,
    delta: torch.Tensor | None = None,
) -> torch.Tensor:
    """One ancestral step from ``t`` to ``t - 1``.

    The noise term is scaled by the posterior standard deviation and is
    dropped entirely at ``t = 1``.
    """
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    beta, alpha, ab = s.beta_at(t), s.alpha_at(t), s.alpha_bar_at(t)
    mean = (x_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    if t == 1 or delta is None:
        return mean
    if delta.shape != x_t.shape:
        raise ValueError(f"delta shape {tuple(delta.shape)} != x_t shape {tuple(x_t.shape)}")
    return mean + sigma_at(s, t) * delta


@torch.no_grad()
def sample(
    model: EpsModel,
    cond: torch.Tensor,
    s: NoiseSchedule,
    generator: torch.Generator | None = None,
    batch_size: int = 64,
) -> torch.Tensor:
    """Draw one image per conditioning mask by running all ``T`` reverse steps.

    Returns images in [0, 1] with the same shape as the (batched) condition.
    """
    cond = _as_batch(cond)
    size = getattr(model, "image_size", None)
    if size is not None and tuple(cond.shape[-2:]) != (size, size):
        raise ValueError(f"condition is {tuple(cond.shape[-2:])}, model was built for {size}x{size}")
    dtype = next(iter(model.parameters())).dtype if hasattr(model, "parameters") else torch.float32
    cond = cond.to(dtype)
    if hasattr(model, "eval"):
        model.eval()
    out = []
    for start in range(0, cond.shape[0], batch_size):
        c = cond[start:start + batch_size]
        x = torch.randn(c.shape, generator=generator, dtype=dtype)
        for t in range(s.T, 0, -1):
            steps = torch.full((c.shape[0],), t, dtype=torch.long)
            eps_hat = model(x, c, steps)
            delta = torch.randn(c.shape, generator=generator, dtype=dtype) if t > 1 else None
            x = reverse_step(x, t, eps_hat, s, delta)
        out.append(from_model_space(x))
    return torch.cat(out)
