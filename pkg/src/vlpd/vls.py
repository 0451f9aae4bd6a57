"""Self-supervised semantic segmentation loss on cosine score maps."""

from __future__ import annotations

import torch


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    """Elementwise smooth L1 with transition point 1: 0.5*x^2 inside, |x|-0.5 outside."""
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def vls_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean smooth-L1 distance between predicted and pseudo-label score maps.

    Both inputs are [H', W', N]; the target is plain data and never receives
    gradient. No spatial masking is applied, every pixel and class counts.
    """
    target = torch.as_tensor(target).detach()
    if predicted.shape != target.shape:
        raise ValueError(
            f"score map shape mismatch: {tuple(predicted.shape)} vs {tuple(target.shape)}"
        )
    return smooth_l1(predicted - target).mean()
