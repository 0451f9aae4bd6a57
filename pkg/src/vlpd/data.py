"""Dataset plumbing: annotation/detection files, images, synthetic scenes.

Datasets live in a directory with an ``images/`` folder of PNGs and a
single ``annotations.txt`` whose lines read
``image_id x y w h visible_ratio``. Detection files share the layout with
a trailing score instead of the visible ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import BoundingBox, iou

ANNOTATION_FILE = "annotations.txt"
IMAGE_DIR = "images"


@dataclass
class DatasetRecord:
    image_path: Path
    boxes: list[BoundingBox]
    pseudo_path: Path | None = None

    @property
    def image_id(self) -> str:
        return self.image_path.stem


def write_annotations(gts_by_image: dict[str, list[BoundingBox]], path: str | Path) -> None:
    lines = []
    for image_id in sorted(gts_by_image):
        for b in gts_by_image[image_id]:
            vr = 1.0 if b.visible_ratio is None else b.visible_ratio
            lines.append(f"{image_id} {b.x:.6f} {b.y:.6f} {b.w:.6f} {b.h:.6f} {vr:.6f}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def parse_annotations(path: str | Path) -> dict[str, list[BoundingBox]]:
    gts: dict[str, list[BoundingBox]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        image_id, x, y, w, h, vr = parts
        gts.setdefault(image_id, []).append(
            BoundingBox(
                x=float(x), y=float(y), w=float(w), h=float(h), visible_ratio=float(vr)
            )
        )
    return gts


def write_detections(dets_by_image: dict[str, list[BoundingBox]], path: str | Path) -> None:
    lines = []
    for image_id in sorted(dets_by_image):
        for b in dets_by_image[image_id]:
            lines.append(
                f"{image_id} {b.x:.6f} {b.y:.6f} {b.w:.6f} {b.h:.6f} {b.score or 0.0:.6f}"
            )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def parse_detections(path: str | Path) -> dict[str, list[BoundingBox]]:
    dets: dict[str, list[BoundingBox]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        image_id, x, y, w, h, score = parts
        dets.setdefault(image_id, []).append(
            BoundingBox(x=float(x), y=float(y), w=float(w), h=float(h), score=float(score))
        )
    return dets


def load_dataset(root: str | Path, pseudo_dir: str | Path | None = None) -> list[DatasetRecord]:
    root = Path(root)
    gts = parse_annotations(root / ANNOTATION_FILE)
    records = []
    for image_path in sorted((root / IMAGE_DIR).glob("*.png")):
        pseudo = None
        if pseudo_dir is not None:
            cand = Path(pseudo_dir) / (image_path.stem + ".vls")
            pseudo = cand if cand.exists() else None
        records.append(
            DatasetRecord(
                image_path=image_path, boxes=gts.get(image_path.stem, []), pseudo_path=pseudo
            )
        )
    if not records:
        raise ValueError(f"no images found under {root / IMAGE_DIR}")
    return records


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG into a [3, H, W] float32 array in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_image(arr: np.ndarray, path: str | Path) -> None:
    """Write a [3, H, W] float array in [0, 1] as PNG (deterministic bytes)."""
    u8 = np.clip(arr * 255.0 + 0.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8).save(path, format="PNG")


def standardize(image: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=image.dtype).reshape(3, 1, 1)
    std = np.asarray(std, dtype=image.dtype).reshape(3, 1, 1)
    return (image - mean) / std


def make_synthetic_dataset(
    seed: int,
    n_images: int,
    dims: tuple[int, int],
    out_dir: str | Path,
    pedestrians: tuple[int, int] = (1, 3),
    distractors: tuple[int, int] = (1, 3),
    occlusion_prob: float = 0.35,
    occlusion_fraction: tuple[float, float] = (0.2, 0.6),
) -> Path:
    """Render a deterministic toy street-scene dataset.

    Pedestrians are bright upright rectangles with width 0.41 * height;
    distractors are bars, squares, and poles; occluders are dark strips
    drawn over some pedestrians. The visible ratio is the exact fraction
    of a pedestrian's pixels still owned by it after all later drawing.
    """
    h, w = dims
    if h % 32 or w % 32:
        raise ValueError(f"dims must be divisible by 32, got {dims}")
    if n_images <= 0:
        raise ValueError("n_images must be positive")
    out_dir = Path(out_dir)
    (out_dir / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))

    gts_by_image: dict[str, list[BoundingBox]] = {}
    for idx in range(n_images):
        image_id = f"img_{idx:04d}"
        img, boxes = _render_scene(
            rng, h, w, pedestrians, distractors, occlusion_prob, occlusion_fraction
        )
        save_image(img, out_dir / IMAGE_DIR / f"{image_id}.png")
        gts_by_image[image_id] = boxes
    write_annotations(gts_by_image, out_dir / ANNOTATION_FILE)
    return out_dir


def _stamp(img: np.ndarray, owner: np.ndarray, oid: int, x0, y0, bw, bh, color) -> None:
    img[:, y0 : y0 + bh, x0 : x0 + bw] = np.asarray(color).reshape(3, 1, 1)
    owner[y0 : y0 + bh, x0 : x0 + bw] = oid


def _render_scene(
    rng: np.random.Generator,
    h: int,
    w: int,
    pedestrians: tuple[int, int],
    distractors: tuple[int, int],
    occlusion_prob: float,
    occlusion_fraction: tuple[float, float],
) -> tuple[np.ndarray, list[BoundingBox]]:
    base = rng.uniform(0.25, 0.45)
    coarse = rng.uniform(-0.06, 0.06, size=(3, h // 8, w // 8))
    img = base + np.kron(coarse, np.ones((1, 8, 8)))
    img += rng.uniform(-0.02, 0.02, size=(3, h, w))
    img = np.clip(img, 0.0, 1.0).astype(np.float64)
    owner = np.full((h, w), -1, dtype=np.int32)

    # Distractors first: background clutter the detector must reject.
    for _ in range(int(rng.integers(distractors[0], distractors[1] + 1))):
        kind = rng.integers(0, 3)
        color = rng.uniform(0.55, 0.9, size=3)
        if kind == 0:  # horizontal bar
            bh, bw = int(rng.integers(8, 18)), int(rng.integers(40, min(90, w - 4)))
        elif kind == 1:  # square
            bh = bw = int(rng.integers(18, 34))
        else:  # thin pole
            bh, bw = int(rng.integers(40, min(70, h - 4))), int(rng.integers(3, 7))
        x0 = int(rng.integers(2, max(3, w - bw - 2)))
        y0 = int(rng.integers(2, max(3, h - bh - 2)))
        _stamp(img, owner, -2, x0, y0, bw, bh, color)

    placed: list[tuple[int, int, int, int]] = []
    n_ped = int(rng.integers(pedestrians[0], pedestrians[1] + 1))
    for pid in range(n_ped):
        for _ in range(40):
            bh = int(rng.integers(52, min(85, h - 8)))
            bw = max(2, int(round(0.41 * bh)))
            x0 = int(rng.integers(2, w - bw - 2))
            y0 = int(rng.integers(2, h - bh - 2))
            cand = BoundingBox(x=float(x0), y=float(y0), w=float(bw), h=float(bh))
            if all(
                iou(cand, BoundingBox(x=float(a), y=float(b), w=float(c), h=float(d))) < 0.1
                for a, b, c, d in placed
            ):
                break
        else:
            continue
        placed.append((x0, y0, bw, bh))
        color = rng.uniform(0.75, 0.98, size=3)
        _stamp(img, owner, pid, x0, y0, bw, bh, color)
        # Darker head band for a bit of structure.
        head = max(2, bh // 6)
        img[:, y0 : y0 + head, x0 : x0 + bw] *= 0.75

        if rng.uniform() < occlusion_prob:
            frac = rng.uniform(*occlusion_fraction)
            cover = int(round(frac * bh))
            if cover > 0:
                oy = y0 + bh - cover  # occlude from the bottom, a common pattern
                _stamp(img, owner, -3, x0, oy, bw, cover, rng.uniform(0.05, 0.25, size=3))

    # Visible ratios come from final pixel ownership, so pedestrians drawn
    # later (or their occluders) count against earlier ones too.
    boxes = [
        BoundingBox(
            x=float(x0),
            y=float(y0),
            w=float(bw),
            h=float(bh),
            visible_ratio=float((owner[y0 : y0 + bh, x0 : x0 + bw] == pid).mean()),
        )
        for pid, (x0, y0, bw, bh) in enumerate(placed)
    ]
    return img.astype(np.float32), boxes
