"""Visual and linguistic encoders.

The toy visual encoder is a small convolutional stack with seeded, fully
deterministic initialization. It produces three stage features (strides
8/16/16) plus a per-pixel linear projection of the last stage into the
shared vision-language space. The toy linguistic encoder turns prompted
class sentences into unit-norm vectors via a hash-seeded RNG, so distinct
prompts map to distinct, reproducible directions.

Real pretrained weights are out of scope here; ``register_encoder`` is the
hook for plugging in an alternative backbone without touching callers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

PROMPT_PLACEHOLDER = "[CLS]"


@dataclass
class StageFeatures:
    """Per-image stage taps. s3 is stride 8, s4 and s5 are stride 16."""

    s3: torch.Tensor
    s4: torch.Tensor
    s5: torch.Tensor


@dataclass
class LinguisticVectors:
    """One unit-norm row per class, order matching ``class_names``."""

    l: np.ndarray  # [N, D']
    class_names: list[str]


class ToyVisualEncoder(nn.Module):
    """Deterministic convolutional encoder with a cross-modal projection.

    Args:
        channels: widths of (stem, stage3, stage4, stage5).
        d_prime: projection width, must match the linguistic vectors.
        seed: initialization seed; two encoders built with the same
            arguments are parameter-identical.
    """

    def __init__(
        self,
        channels: tuple[int, int, int, int] = (16, 32, 48, 64),
        d_prime: int = 64,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        c1, c3, c4, c5 = channels
        self.d_prime = d_prime
        self.seed = seed
        self._frozen = False
        self.stem = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c1, c1, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.stage3 = nn.Sequential(nn.Conv2d(c1, c3, 3, stride=2, padding=1), nn.ReLU())
        self.stage4 = nn.Sequential(nn.Conv2d(c3, c4, 3, stride=2, padding=1), nn.ReLU())
        self.stage5 = nn.Sequential(nn.Conv2d(c4, c5, 3, stride=1, padding=1), nn.ReLU())
        self.projection = nn.Conv2d(c5, d_prime, 1)
        seeded_init_(self, seed)
        self.to(dtype)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "ToyVisualEncoder":
        """Mark as the pseudo-labeling encoder: no gradients, eval mode."""
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self._frozen = True
        return self

    def forward(
        self, images: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Batch forward. ``images`` is [B, 3, H, W] with H, W divisible by 32."""
        check_input_dims(images.shape[-2], images.shape[-1])
        x = self.stem(images)
        s3 = self.stage3(x)
        s4 = self.stage4(s3)
        s5 = self.stage5(s4)
        return s3, s4, s5

    def project(self, s5: torch.Tensor) -> torch.Tensor:
        """Project stage-5 features per pixel; returns [B, H', W', D']."""
        return self.projection(s5).permute(0, 2, 3, 1)

    def encode_image(self, image: torch.Tensor) -> tuple[StageFeatures, torch.Tensor]:
        """Single-image convenience: returns stage taps and projected [H', W', D']."""
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"expected [3, H, W] image, got {tuple(image.shape)}")
        s3, s4, s5 = self.forward(image.unsqueeze(0))
        v = self.project(s5)[0]
        return StageFeatures(s3=s3[0], s4=s4[0], s5=s5[0]), v


def check_input_dims(h: int, w: int) -> None:
    if h % 32 or w % 32:
        raise ValueError(f"input dims must be divisible by 32, got {h}x{w}")


def seeded_init_(module: nn.Module, seed: int) -> None:
    """He-style init driven by one generator; order is the parameter order."""
    gen = torch.Generator().manual_seed(seed)
    for name, p in module.named_parameters():
        with torch.no_grad():
            if p.ndim > 1:
                fan_in = int(np.prod(p.shape[1:]))
                w = torch.randn(p.shape, generator=gen, dtype=torch.float64)
                p.copy_((w * (2.0 / fan_in) ** 0.5).to(p.dtype))
            else:
                p.zero_()


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over parameter names and raw bytes, for freeze auditing."""
    digest = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(str(tuple(p.shape)).encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def encode_class_prompts(
    class_names: list[str],
    template: str = "A picture of [CLS]",
    d_prime: int = 64,
    seed: int = 0,
) -> LinguisticVectors:
    """Embed prompted class sentences as unit-norm vectors.

    Each class name is substituted into ``template``; the sentence (plus
    seed and width) is hashed to seed an RNG that draws the vector, so the
    embedding is stable across platforms and runs.
    """
    if not class_names:
        raise ValueError("class list must be non-empty")
    if PROMPT_PLACEHOLDER not in template:
        raise ValueError(f"template must contain {PROMPT_PLACEHOLDER!r}: {template!r}")
    rows = np.empty((len(class_names), d_prime), dtype=np.float64)
    for i, name in enumerate(class_names):
        sentence = template.replace(PROMPT_PLACEHOLDER, name)
        digest = hashlib.sha256(f"{sentence}|{seed}|{d_prime}".encode()).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
        vec = rng.standard_normal(d_prime)
        rows[i] = vec / np.linalg.norm(vec)
    return LinguisticVectors(l=rows, class_names=list(class_names))


_ENCODER_FACTORIES: dict[str, Callable[..., ToyVisualEncoder]] = {
    "toy": ToyVisualEncoder,
}


def register_encoder(name: str, factory: Callable[..., nn.Module]) -> None:
    """Extension point for alternative backbones (e.g. real pretrained ones)."""
    _ENCODER_FACTORIES[name] = factory


def build_visual_encoder(kind: str = "toy", **kwargs) -> nn.Module:
    if kind not in _ENCODER_FACTORIES:
        raise ValueError(
            f"unknown encoder kind {kind!r}; registered: {sorted(_ENCODER_FACTORIES)}"
        )
    return _ENCODER_FACTORIES[kind](**kwargs)
