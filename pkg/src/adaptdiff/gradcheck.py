"""Finite-difference checks of both networks on tiny float64 instances."""

from __future__ import annotations

import torch

from .diffusion import training_loss
from .nets import ArchConfig, build_model, dice_ce_loss, gradient_check
from .schedule import build_linear_schedule

TINY = dict(image_size=8, base_width=2, depth=2, time_dim=8, spade_hidden=4, dtype="float64")


def _perturb(model, seed: int):
    # SPADE output convs start at zero; move off that point so every path carries gradient
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


def run_grad_checks(seed: int = 0, n_checks: int = 60, epsilon: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error for the denoiser loss and the segmentation loss."""
    g = torch.Generator().manual_seed(seed)
    size = TINY["image_size"]
    x0 = torch.rand(2, 1, size, size, dtype=torch.float64, generator=g)
    mask = (torch.rand(2, 1, size, size, generator=g) > 0.6).double()
    eps = torch.randn(2, 1, size, size, dtype=torch.float64, generator=g)
    t = torch.tensor([3, 17])
    schedule = build_linear_schedule(20, 1e-4, 0.2)

    den = _perturb(build_model(ArchConfig("denoiser", **TINY), seed=seed), seed + 1)
    seg = _perturb(build_model(ArchConfig("segmenter", **TINY), seed=seed), seed + 2)
    return {
        "denoiser": gradient_check(list(den.parameters()),
                                   lambda: training_loss(den, x0, mask, schedule, t=t, eps=eps),
                                   n_checks, epsilon, torch.Generator().manual_seed(seed + 3)),
        "segmenter": gradient_check(list(seg.parameters()), lambda: dice_ce_loss(seg(x0), mask),
                                    n_checks, epsilon, torch.Generator().manual_seed(seed + 4)),
    }
