"""Shared primitives: bounding boxes, run configuration, tensor container I/O.

The tensor container is the on-disk format for cached score maps and
checkpoint parameters. It is deliberately minimal: magic, rank, dims,
dtype code, raw little-endian payload. Round trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

CONTAINER_MAGIC = b"VLPD"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class ContainerFormatError(ValueError):
    """Raised when a tensor container file is malformed."""


def save_tensor_container(arr: np.ndarray, path: str | Path) -> None:
    """Write a float array to ``path`` in the binary container format.

    Layout: magic ``VLPD``, u8 rank, rank * u32 LE dims, u8 dtype code
    (0 = float32, 1 = float64), then the row-major LE payload.
    """
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_FOR_KIND:
        raise TypeError(f"container supports float32/float64, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("container rank limited to 255")
    code = _CODE_FOR_KIND[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(struct.pack("<B", code))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def load_tensor_container(path: str | Path) -> np.ndarray:
    """Read an array written by :func:`save_tensor_container`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 5 or data[:4] != CONTAINER_MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {data[:4]!r}")
    rank = data[4]
    offset = 5
    if len(data) < offset + 4 * rank + 1:
        raise ContainerFormatError(f"{path}: truncated dims (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", data, offset)
    offset += 4 * rank
    code = data[offset]
    offset += 1
    if code not in _DTYPE_CODES:
        raise ContainerFormatError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    need = count * dtype.itemsize
    payload = data[offset:]
    if len(payload) < need:
        raise ContainerFormatError(
            f"{path}: truncated payload, expected {need} bytes, got {len(payload)}"
        )
    if len(payload) > need:
        raise ContainerFormatError(
            f"{path}: payload has {len(payload) - need} trailing bytes"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, top-left corner plus width/height in pixels.

    ``score`` is set on detections, ``visible_ratio`` on ground truth.
    """

    x: float
    y: float
    w: float
    h: float
    score: float | None = None
    visible_ratio: float | None = None
    ignore: bool = False

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive extent, got w={self.w}, h={self.h}")
        if self.visible_ratio is not None and not (0.0 <= self.visible_ratio <= 1.0):
            raise ValueError(f"visible_ratio outside [0,1]: {self.visible_ratio}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


# Default context-class policy. Original class names map to a compacted
# name, or to None when the class is dropped from the context set.
DEFAULT_CLASS_POLICY: dict[str, str | None] = {
    "road": "ground",
    "sidewalk": "ground",
    "building": "building",
    "wall": "building",
    "fence": "building",
    "vegetation": "tree",
    "terrain": "tree",
    "person": "human",
    "rider": "human",
    "pole": "traffic sign",
    "traffic light": "traffic sign",
    "traffic sign": "traffic sign",
    "car": "car",
    "bicycle": "bicycle",
    "bus": "bus",
    "truck": "truck",
    "motorcycle": None,
    "train": None,
}


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters and run settings, serializable to/from YAML.

    Immutable after construction; derive variants with dataclasses.replace.
    """

    lambda1: float = 100.0
    lambda2: float = 1e-4
    tau: float = 7e-2
    tau_prime: float = 1e-3
    stride: int = 4
    aspect_ratio: float = 0.41
    learning_rate: float = 1e-4
    batch_size: int = 4
    iterations: int = 500
    seed: int = 0
    dtype: str = "float32"
    d_prime: int = 64
    encoder_channels: tuple[int, int, int, int] = (16, 32, 48, 64)
    detection_channels: int = 32
    head_channels: int = 32
    prompt_template: str = "A picture of [CLS]"
    human_class: str = "human"
    image_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    image_std: tuple[float, float, float] = (0.25, 0.25, 0.25)
    score_threshold: float = 0.01
    nms_iou: float = 0.5
    augment_hflip: bool = False
    augment_crop: bool = False
    crop_dims: tuple[int, int] | None = None
    log_every: int = 50
    class_policy: dict[str, str | None] = field(
        default_factory=lambda: dict(DEFAULT_CLASS_POLICY)
    )
    dataset: str | None = None
    out_dir: str | None = None
    pseudo_dir: str | None = None

    def __post_init__(self) -> None:
        if self.tau <= 0 or self.tau_prime <= 0:
            raise ValueError("temperatures must be positive")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.augment_crop and self.crop_dims is None:
            raise ValueError("augment_crop requires crop_dims")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["image_mean"] = list(self.image_mean)
        d["image_std"] = list(self.image_std)
        if self.crop_dims is not None:
            d["crop_dims"] = list(self.crop_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("encoder_channels", "image_mean", "image_std", "crop_dims"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            payload = yaml.safe_load(fh) or {}
        if not isinstance(payload, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(payload)

    def to_yaml(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    def torch_dtype(self):
        import torch

        return torch.float64 if self.dtype == "float64" else torch.float32
