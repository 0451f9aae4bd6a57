"""Cross-modal cosine mapping, class compaction, and pseudo-label generation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import DEFAULT_CLASS_POLICY, load_tensor_container, save_tensor_container
from .encoders import LinguisticVectors, ToyVisualEncoder

logger = logging.getLogger(__name__)

ZERO_NORM_EPS = 1e-12


class PolicyError(ValueError):
    """Raised for inconsistent or degenerate class policies."""


@dataclass
class ClassPolicy:
    """Maps original class names to compacted names; ``None`` drops a class."""

    mapping: dict[str, str | None] = field(
        default_factory=lambda: dict(DEFAULT_CLASS_POLICY)
    )

    @classmethod
    def default(cls) -> "ClassPolicy":
        return cls()

    @property
    def used(self) -> dict[str, bool]:
        return {orig: tgt is not None for orig, tgt in self.mapping.items()}


def compact_classes(policy: ClassPolicy) -> list[str]:
    """Resolve a policy into the ordered, duplicate-free compacted class list.

    Order follows first appearance in the policy mapping. A compacted name
    that is itself re-mapped to a different name is rejected as inconsistent.
    """
    compacted: list[str] = []
    for target in policy.mapping.values():
        if target is None:
            continue
        # A compacted name reused as an original must map to itself,
        # otherwise two routes disagree about where the class lands.
        if target in policy.mapping and policy.mapping[target] not in (None, target):
            raise PolicyError(
                f"class {target!r} is both a compaction target and remapped to "
                f"{policy.mapping[target]!r}"
            )
        if target not in compacted:
            compacted.append(target)
    if not compacted:
        raise PolicyError("policy discards every class; compacted set is empty")
    return compacted


def cosine_score_map(v: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
    """Per-pixel, per-class cosine similarity.

    Args:
        v: projected vision features, [H', W', D'].
        l: linguistic class vectors, [N, D'].

    Returns:
        Score map [H', W', N] with values in [-1, 1]. Zero-norm pixels or
        class vectors score 0 and are counted in a debug diagnostic.
    """
    if v.shape[-1] != l.shape[-1]:
        raise ValueError(
            f"feature width mismatch: vision {v.shape[-1]} vs linguistic {l.shape[-1]}"
        )
    v_norm = v.norm(dim=-1, keepdim=True)
    l_norm = l.norm(dim=-1, keepdim=True)
    n_zero = int((v_norm < ZERO_NORM_EPS).sum() + (l_norm < ZERO_NORM_EPS).sum())
    if n_zero:
        logger.warning("cosine_score_map: %d zero-norm vectors scored as 0", n_zero)
    vn = v / v_norm.clamp_min(ZERO_NORM_EPS)
    ln = l / l_norm.clamp_min(ZERO_NORM_EPS)
    return torch.einsum("hwd,nd->hwn", vn, ln)


def generate_pseudo_labels(
    image: torch.Tensor,
    frozen_encoder: ToyVisualEncoder,
    linguistic_vectors: LinguisticVectors,
) -> np.ndarray:
    """Score an image against the class set with the frozen encoder pair.

    Returns a plain [H', W', N] array; being detached data, nothing can
    backpropagate into the labels.
    """
    if not frozen_encoder.frozen:
        raise ValueError("pseudo labels require a frozen encoder; call freeze() first")
    with torch.no_grad():
        _, v = frozen_encoder.encode_image(image)
        l = torch.from_numpy(linguistic_vectors.l).to(v.dtype)
        scores = cosine_score_map(v, l)
    return scores.cpu().numpy()


def pseudo_label_path(image_path: str | Path, cache_dir: str | Path) -> Path:
    return Path(cache_dir) / (Path(image_path).stem + ".vls")


def save_pseudo_labels(scores: np.ndarray, path: str | Path) -> None:
    save_tensor_container(scores, path)


def load_pseudo_labels(path: str | Path) -> np.ndarray:
    return load_tensor_container(path)
