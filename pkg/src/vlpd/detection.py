"""Anchor-free center/scale/offset detection: targets, head, loss, decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core import BoundingBox, iou
from .vls import smooth_l1

# Focal-style center loss constants and per-term weights.
FOCAL_GAMMA = 2.0
FOCAL_BETA = 4.0
CENTER_WEIGHT = 0.01
SCALE_WEIGHT = 1.0
OFFSET_WEIGHT = 0.1
GAUSSIAN_K = 2.0
_LOG_EPS = 1e-12


@dataclass
class DetectionTargets:
    """Per-image training targets on the stride-reduced grid.

    ``center`` is the max-combined Gaussian map with peak value 1 at each
    quantized box center; ``scale`` holds log(h / stride) and ``offset`` the
    fractional (x, y) center remainders, both defined on ``pos_mask`` cells.
    """

    center: torch.Tensor  # [H, W]
    scale: torch.Tensor  # [H, W]
    offset: torch.Tensor  # [H, W, 2]
    pos_mask: torch.Tensor  # bool [H, W]

    @property
    def num_positives(self) -> int:
        return int(self.pos_mask.sum())


@dataclass
class HeadOutputs:
    """Per-image raw head maps; center is pre-sigmoid."""

    center_logits: torch.Tensor  # [H, W]
    scale_pred: torch.Tensor  # [H, W]
    offset_pred: torch.Tensor  # [H, W, 2]


def build_targets(
    boxes: list[BoundingBox],
    dims: tuple[int, int],
    stride: int,
    dtype: torch.dtype = torch.float32,
) -> DetectionTargets:
    """Rasterize ground-truth boxes into center/scale/offset targets.

    Each box stamps a 2D Gaussian over its own cell extent with
    sigma = extent / (2 * stride * k), k = 2, floored at half a cell;
    overlapping Gaussians combine by elementwise max. Boxes sharing a
    quantized center overwrite scale/offset in input order.
    """
    h, w = dims
    center = torch.zeros(h, w, dtype=dtype)
    scale = torch.zeros(h, w, dtype=dtype)
    offset = torch.zeros(h, w, 2, dtype=dtype)
    pos_mask = torch.zeros(h, w, dtype=torch.bool)

    ys = torch.arange(h, dtype=dtype)
    xs = torch.arange(w, dtype=dtype)
    for box in boxes:
        cx = (box.x + box.w / 2.0) / stride
        cy = (box.y + box.h / 2.0) / stride
        col = int(cx)
        row = int(cy)
        if not (0 <= col < w and 0 <= row < h):
            raise ValueError(
                f"box center ({cx:.2f}, {cy:.2f}) cells falls outside {h}x{w} map"
            )
        sigma_x = max(box.w / (2.0 * stride * GAUSSIAN_K), 0.5)
        sigma_y = max(box.h / (2.0 * stride * GAUSSIAN_K), 0.5)
        half_w = max(int(round(box.w / (2.0 * stride))), 1)
        half_h = max(int(round(box.h / (2.0 * stride))), 1)
        x0, x1 = max(0, col - half_w), min(w - 1, col + half_w)
        y0, y1 = max(0, row - half_h), min(h - 1, row + half_h)
        gy = torch.exp(-((ys[y0 : y1 + 1] - row) ** 2) / (2.0 * sigma_y**2))
        gx = torch.exp(-((xs[x0 : x1 + 1] - col) ** 2) / (2.0 * sigma_x**2))
        patch = gy.unsqueeze(1) * gx.unsqueeze(0)
        center[y0 : y1 + 1, x0 : x1 + 1] = torch.maximum(
            center[y0 : y1 + 1, x0 : x1 + 1], patch
        )
        center[row, col] = 1.0
        pos_mask[row, col] = True
        scale[row, col] = math.log(box.h / stride)
        offset[row, col, 0] = cx - col
        offset[row, col, 1] = cy - row
    return DetectionTargets(center=center, scale=scale, offset=offset, pos_mask=pos_mask)


def detection_loss(
    pred: HeadOutputs, tgt: DetectionTargets
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of focal center loss and smooth-L1 scale/offset terms.

    Center: positives (peak cells) contribute (1-p)^gamma * log p, other
    cells (1-g)^beta * p^gamma * log(1-p), normalized by the positive
    count. Scale and offset are smooth-L1 on positive cells, averaged per
    positive; the offset term sums its two components per cell.
    """
    if pred.center_logits.shape != tgt.center.shape:
        raise ValueError(
            f"map shape mismatch: {tuple(pred.center_logits.shape)} vs "
            f"{tuple(tgt.center.shape)}"
        )
    p = torch.sigmoid(pred.center_logits)
    pos = tgt.pos_mask
    n_pos = int(pos.sum())
    norm = max(1, n_pos)

    pos_term = ((1.0 - p) ** FOCAL_GAMMA * torch.log(p.clamp_min(_LOG_EPS)))[pos].sum()
    neg_w = (1.0 - tgt.center) ** FOCAL_BETA
    neg_term = (neg_w * p**FOCAL_GAMMA * torch.log((1.0 - p).clamp_min(_LOG_EPS)))[
        ~pos
    ].sum()
    l_center = -(pos_term + neg_term) / norm

    if n_pos:
        l_scale = smooth_l1(pred.scale_pred[pos] - tgt.scale[pos]).mean()
        l_offset = smooth_l1(pred.offset_pred[pos] - tgt.offset[pos]).sum(dim=-1).mean()
    else:
        l_scale = p.sum() * 0.0
        l_offset = p.sum() * 0.0

    total = CENTER_WEIGHT * l_center + SCALE_WEIGHT * l_scale + OFFSET_WEIGHT * l_offset
    return total, {"center": l_center, "scale": l_scale, "offset": l_offset}


class DetectionNeck(nn.Module):
    """Deconvolve the stage taps to a common stride-4 grid and fuse them."""

    def __init__(
        self, stage_channels: tuple[int, int, int], out_channels: int, branch_channels: int = 16
    ) -> None:
        super().__init__()
        c3, c4, c5 = stage_channels
        self.up3 = nn.ConvTranspose2d(c3, branch_channels, 4, stride=2, padding=1)
        self.up4 = nn.ConvTranspose2d(c4, branch_channels, 8, stride=4, padding=2)
        self.up5 = nn.ConvTranspose2d(c5, branch_channels, 8, stride=4, padding=2)
        self.fuse = nn.Conv2d(3 * branch_channels, out_channels, 1)

    def forward(self, s3: torch.Tensor, s4: torch.Tensor, s5: torch.Tensor) -> torch.Tensor:
        merged = torch.cat([self.up3(s3), self.up4(s4), self.up5(s5)], dim=1)
        return self.fuse(merged)


class DetectionHead(nn.Module):
    """Three-branch head over fused features plus context score channels.

    Input is [B, D + (N-1), H, W]: detection features concatenated with the
    (detached) upsampled context scores. Output maps follow the per-image
    layouts of :class:`HeadOutputs`.
    """

    def __init__(self, in_channels: int, feat_channels: int = 32) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.reduce = nn.Sequential(
            nn.Conv2d(in_channels, feat_channels, 3, padding=1), nn.ReLU()
        )
        self.center = nn.Conv2d(feat_channels, 1, 1)
        self.scale = nn.Conv2d(feat_channels, 1, 1)
        self.offset = nn.Conv2d(feat_channels, 2, 1)

    def init_center_bias(self, prior: float = 0.1) -> None:
        # Start the squashed center map near `prior` so the focal loss is tame.
        with torch.no_grad():
            self.center.bias.fill_(-math.log((1.0 - prior) / prior))

    def forward(
        self, features: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if features.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} input channels, got {features.shape[1]}"
            )
        x = self.reduce(features)
        center = self.center(x)[:, 0]
        scale = self.scale(x)[:, 0]
        offset = self.offset(x).permute(0, 2, 3, 1)
        return center, scale, offset


def head_outputs_for_image(
    center: torch.Tensor, scale: torch.Tensor, offset: torch.Tensor, index: int
) -> HeadOutputs:
    return HeadOutputs(
        center_logits=center[index], scale_pred=scale[index], offset_pred=offset[index]
    )


def decode_boxes(
    out: HeadOutputs,
    threshold: float,
    stride: int,
    aspect_ratio: float = 0.41,
) -> list[BoundingBox]:
    """Turn head maps into scored boxes.

    A cell is kept when its squashed center score is a 3x3 local maximum
    and at least ``threshold``; height is stride * exp(scale), width is
    ``aspect_ratio`` times the height, and the center lands at
    (cell + offset) * stride.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    scores = torch.sigmoid(out.center_logits)
    local_max = F.max_pool2d(scores[None, None], 3, stride=1, padding=1)[0, 0]
    keep = (scores >= local_max) & (scores >= threshold)
    boxes: list[BoundingBox] = []
    for row, col in torch.nonzero(keep).tolist():
        h = stride * math.exp(float(out.scale_pred[row, col]))
        w = aspect_ratio * h
        cx = (col + float(out.offset_pred[row, col, 0])) * stride
        cy = (row + float(out.offset_pred[row, col, 1])) * stride
        boxes.append(
            BoundingBox(
                x=cx - w / 2.0, y=cy - h / 2.0, w=w, h=h, score=float(scores[row, col])
            )
        )
    return boxes


def nms(boxes: list[BoundingBox], iou_threshold: float = 0.5) -> list[BoundingBox]:
    """Greedy suppression by descending score; ties break on (x, y)."""
    ordered = sorted(boxes, key=lambda b: (-(b.score or 0.0), b.x, b.y))
    kept: list[BoundingBox] = []
    for cand in ordered:
        if all(iou(cand, k) < iou_threshold for k in kept):
            kept.append(cand)
    return kept
