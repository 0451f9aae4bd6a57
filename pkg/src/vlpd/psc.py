"""Prototype-based contrastive supervision of detection features.

Negative prototypes summarize where each non-human context class lives,
by weighting detection features with the temperature-normalized score
maps. Positive prototypes do the same with the pedestrian center
Gaussians. Pedestrian-position features act as queries that are pulled
toward their image's positive prototype and pushed from every negative
prototype in the mini-batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

# Prototypes below this pre-normalization magnitude are excluded: a near-zero
# aggregate has no meaningful direction to normalize.
PROTOTYPE_NORM_EPS = 1e-8
_NORMALIZE_EPS = 1e-12


def upsample_scores(
    s_bar: torch.Tensor,
    target: tuple[int, int],
    class_names: list[str],
    human_class: str = "human",
) -> torch.Tensor:
    """Bilinearly upsample a score map and drop the pedestrian channel.

    Args:
        s_bar: predicted score map, [H', W', N].
        target: output spatial dims (H, W), each >= the source dims.
        class_names: channel order of ``s_bar``; must contain ``human_class``.

    Returns:
        [H, W, N-1] map over the non-human classes, still in [-1, 1].
    """
    if len(class_names) != s_bar.shape[-1]:
        raise ValueError(
            f"class list length {len(class_names)} != channels {s_bar.shape[-1]}"
        )
    if human_class not in class_names:
        raise ValueError(f"class set has no {human_class!r} channel: {class_names}")
    h, w = target
    if h < s_bar.shape[0] or w < s_bar.shape[1]:
        raise ValueError(f"target dims {target} smaller than source {tuple(s_bar.shape[:2])}")
    keep = [i for i, name in enumerate(class_names) if name != human_class]
    chw = s_bar[..., keep].permute(2, 0, 1).unsqueeze(0)
    up = F.interpolate(chw, size=(h, w), mode="bilinear", align_corners=False)
    return up[0].permute(1, 2, 0)


def non_human_classes(class_names: list[str], human_class: str = "human") -> list[str]:
    return [c for c in class_names if c != human_class]


def temperature_softmax(s_dot: torch.Tensor, tau_prime: float) -> torch.Tensor:
    """Per-pixel softmax over the class axis at temperature ``tau_prime``.

    Max-subtraction keeps the exponentials finite even at very low
    temperatures; each pixel's class weights sum to 1.
    """
    if tau_prime <= 0:
        raise ValueError(f"temperature must be positive, got {tau_prime}")
    z = s_dot / tau_prime
    z = z - z.amax(dim=-1, keepdim=True)
    e = z.exp()
    return e / e.sum(dim=-1, keepdim=True)


def aggregate_prototypes(e: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Spatially aggregate features into one prototype row per weight channel.

    Args:
        e: detection features, [D, H, W].
        weights: per-pixel weights, [H, W, K].

    Returns:
        [K, D] prototypes, row k = sum_i e_i * weights_i^k.
    """
    if e.shape[-2:] != weights.shape[:2]:
        raise ValueError(
            f"spatial dims mismatch: features {tuple(e.shape[-2:])} vs "
            f"weights {tuple(weights.shape[:2])}"
        )
    return torch.einsum("dhw,hwk->kd", e, weights)


@dataclass
class PrototypeBank:
    """Mini-batch prototypes, stored pre-normalization.

    ``negatives`` is [B, K, D] (one row per image and non-human class),
    ``positive`` is [B, D], and ``negative_valid`` masks out near-zero
    aggregates that have no direction.
    """

    negatives: torch.Tensor
    positive: torch.Tensor
    negative_valid: torch.Tensor


def build_prototype_bank(
    features: torch.Tensor,
    negative_weights: torch.Tensor,
    gaussians: torch.Tensor,
) -> PrototypeBank:
    """Aggregate per-image prototypes for a mini-batch.

    Args:
        features: [B, D, H, W] detection features.
        negative_weights: [B, H, W, K] normalized class scores; pass them
            detached so prototype weighting stays plain data.
        gaussians: [B, H, W] pedestrian center maps.
    """
    negatives = torch.stack(
        [aggregate_prototypes(features[b], negative_weights[b]) for b in range(features.shape[0])]
    )
    positive = torch.stack(
        [
            aggregate_prototypes(features[b], gaussians[b].unsqueeze(-1))[0]
            for b in range(features.shape[0])
        ]
    )
    negative_valid = negatives.detach().norm(dim=-1) >= PROTOTYPE_NORM_EPS
    return PrototypeBank(negatives=negatives, positive=positive, negative_valid=negative_valid)


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(_NORMALIZE_EPS)


def psc_loss(
    features: torch.Tensor,
    gaussians: torch.Tensor,
    bank: PrototypeBank,
    tau: float,
) -> torch.Tensor:
    """Contrastive loss over pedestrian-position queries.

    Queries are the unit-normalized feature vectors at Gaussian-positive
    positions of each image. Each query gets its own image's positive
    prototype and every valid negative prototype of the whole batch. The
    result is the mean per-query loss over all queries in the batch; with
    no positive positions anywhere it is 0.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    batch = features.shape[0]
    neg_flat = bank.negatives.reshape(-1, bank.negatives.shape[-1])
    neg_mask = bank.negative_valid.reshape(-1)
    negs = _unit(neg_flat[neg_mask])

    total = features.sum() * 0.0
    n_queries = 0
    for b in range(batch):
        ys, xs = torch.nonzero(gaussians[b] > 0, as_tuple=True)
        if ys.numel() == 0:
            continue
        queries = _unit(features[b][:, ys, xs].transpose(0, 1))
        pos = _unit(bank.positive[b])
        pos_logit = (queries @ pos) / tau
        neg_logits = (queries @ negs.transpose(0, 1)) / tau
        all_logits = torch.cat([pos_logit.unsqueeze(1), neg_logits], dim=1)
        total = total + (torch.logsumexp(all_logits, dim=1) - pos_logit).sum()
        n_queries += int(ys.numel())

    if n_queries == 0:
        logger.warning("psc_loss: no positive positions in the batch")
        return total
    return total / n_queries
