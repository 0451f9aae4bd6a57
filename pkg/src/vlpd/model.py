"""Full trainable network: encoder, context score branch, neck, and head."""

from __future__ import annotations

import torch
from torch import nn

from .core import RunConfig
from .cross_modal import ClassPolicy, compact_classes, cosine_score_map
from .detection import DetectionHead, DetectionNeck
from .encoders import ToyVisualEncoder, encode_class_prompts, seeded_init_
from .psc import upsample_scores


class VlpdModel(nn.Module):
    """Trainee network producing detection maps and context score maps.

    The encoder is initialized exactly like the frozen pseudo-labeling
    encoder (same seed), so at step 0 the predicted score maps equal the
    pseudo labels. The upsampled context scores are detached before they
    feed the head or weight prototypes; only the score-map regression
    trains that branch.
    """

    def __init__(self, cfg: RunConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.class_names = compact_classes(ClassPolicy(dict(cfg.class_policy)))
        dtype = cfg.torch_dtype()
        self.encoder = ToyVisualEncoder(
            channels=cfg.encoder_channels, d_prime=cfg.d_prime, seed=cfg.seed, dtype=dtype
        )
        c1, c3, c4, c5 = cfg.encoder_channels
        self.neck = DetectionNeck((c3, c4, c5), cfg.detection_channels)
        n_context = len(self.class_names) - 1
        self.head = DetectionHead(
            cfg.detection_channels + n_context, feat_channels=cfg.head_channels
        )
        seeded_init_(self.neck, cfg.seed + 1)
        seeded_init_(self.head, cfg.seed + 2)
        self.head.init_center_bias()
        vectors = encode_class_prompts(
            self.class_names, cfg.prompt_template, d_prime=cfg.d_prime, seed=cfg.seed
        )
        self.register_buffer("linguistic", torch.from_numpy(vectors.l).to(dtype))
        self.to(dtype)

    def forward(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        """Run the full network on a [B, 3, H, W] batch.

        Returns a dict with detection features ``e`` [B, D, H, W], predicted
        score maps ``s_bar`` [B, H', W', N], detached upsampled context
        scores ``s_dot`` [B, H, W, N-1], and the three head maps.
        """
        s3, s4, s5 = self.encoder(images)
        v = self.encoder.project(s5)
        s_bar = torch.stack([cosine_score_map(v[b], self.linguistic) for b in range(len(v))])
        e = self.neck(s3, s4, s5)
        h, w = e.shape[-2:]
        s_dot = torch.stack(
            [
                upsample_scores(
                    s_bar[b].detach(), (h, w), self.class_names, self.cfg.human_class
                )
                for b in range(len(s_bar))
            ]
        )
        head_in = torch.cat([e, s_dot.permute(0, 3, 1, 2)], dim=1)
        center, scale, offset = self.head(head_in)
        return {
            "e": e,
            "s_bar": s_bar,
            "s_dot": s_dot,
            "center": center,
            "scale": scale,
            "offset": offset,
        }
