"""Training loop, checkpointing, inference, and evaluation orchestration."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import BoundingBox, RunConfig, load_tensor_container, save_tensor_container
from .cross_modal import (
    ClassPolicy,
    compact_classes,
    generate_pseudo_labels,
    pseudo_label_path,
    save_pseudo_labels,
)
from .data import DatasetRecord, load_dataset, load_image, standardize, write_detections
from .detection import (
    build_targets,
    decode_boxes,
    detection_loss,
    head_outputs_for_image,
    nms,
)
from .encoders import ToyVisualEncoder, encode_class_prompts, parameter_hash
from .evaluation import EvalReport, evaluate_subsets
from .model import VlpdModel
from .psc import build_prototype_bank, psc_loss, temperature_softmax
from .vls import vls_loss

logger = logging.getLogger(__name__)

DETERMINISM_ENV = "VLPD_DETERMINISTIC"
LOG_HEADER = "iteration\tdetection\tvls\tpsc\tcombined"


class TrainingDivergedError(RuntimeError):
    """Raised when a loss term stops being finite."""


def apply_determinism_mode() -> bool:
    if os.environ.get(DETERMINISM_ENV) == "1":
        torch.set_num_threads(1)
        return True
    return False


def combined_loss(l_det, l_vls, l_psc, cfg: RunConfig):
    """Weighted total objective; rejects non-finite terms by name."""
    for name, value in (("detection", l_det), ("vls", l_vls), ("psc", l_psc)):
        v = float(value.detach() if isinstance(value, torch.Tensor) else value)
        if not math.isfinite(v):
            raise TrainingDivergedError(f"{name} loss is not finite: {v}")
    return l_det + cfg.lambda1 * l_vls + cfg.lambda2 * l_psc


@dataclass
class LogRow:
    iteration: int
    detection: float
    vls: float
    psc: float
    combined: float

    def format(self) -> str:
        return (
            f"{self.iteration}\t{self.detection:.9g}\t{self.vls:.9g}"
            f"\t{self.psc:.9g}\t{self.combined:.9g}"
        )


@dataclass
class TrainResult:
    checkpoint_dir: Path | None
    log_rows: list[LogRow]
    frozen_hash_before: str
    frozen_hash_after: str
    model: "VlpdModel"

    @property
    def initial_combined(self) -> float:
        return self.log_rows[0].combined

    @property
    def final_combined(self) -> float:
        return self.log_rows[-1].combined


def frozen_encoder_for(cfg: RunConfig) -> ToyVisualEncoder:
    return ToyVisualEncoder(
        channels=cfg.encoder_channels,
        d_prime=cfg.d_prime,
        seed=cfg.seed,
        dtype=cfg.torch_dtype(),
    ).freeze()


def generate_dataset_pseudo_labels(
    records: list[DatasetRecord], cfg: RunConfig, out_dir: str | Path
) -> list[Path]:
    """Score every image with the frozen encoder pair and cache the maps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frozen = frozen_encoder_for(cfg)
    class_names = compact_classes(ClassPolicy(dict(cfg.class_policy)))
    vectors = encode_class_prompts(
        class_names, cfg.prompt_template, d_prime=cfg.d_prime, seed=cfg.seed
    )
    paths = []
    for record in records:
        image = _load_standardized(record.image_path, cfg)
        scores = generate_pseudo_labels(
            torch.from_numpy(image).to(cfg.torch_dtype()), frozen, vectors
        )
        path = pseudo_label_path(record.image_path, out_dir)
        save_pseudo_labels(scores, path)
        paths.append(path)
    return paths


def _load_standardized(path, cfg: RunConfig) -> np.ndarray:
    image = load_image(path)
    arr = standardize(image, cfg.image_mean, cfg.image_std)
    return arr.astype(np.float64 if cfg.dtype == "float64" else np.float32)


def _hflip_sample(
    image: np.ndarray, boxes: list[BoundingBox]
) -> tuple[np.ndarray, list[BoundingBox]]:
    width = image.shape[-1]
    flipped = image[..., ::-1].copy()
    out = [
        BoundingBox(
            x=width - b.x - b.w, y=b.y, w=b.w, h=b.h, visible_ratio=b.visible_ratio
        )
        for b in boxes
    ]
    return flipped, out


def _crop_sample(
    image: np.ndarray,
    boxes: list[BoundingBox],
    dims: tuple[int, int],
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[BoundingBox]]:
    ch, cw = dims
    h, w = image.shape[-2:]
    if ch % 32 or cw % 32:
        raise ValueError(f"crop dims must be divisible by 32, got {dims}")
    if ch > h or cw > w:
        raise ValueError(f"crop dims {dims} exceed image dims {(h, w)}")
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    cropped = image[:, y0 : y0 + ch, x0 : x0 + cw].copy()
    out = []
    for b in boxes:
        cx, cy = b.x + b.w / 2 - x0, b.y + b.h / 2 - y0
        if not (0 <= cx < cw and 0 <= cy < ch):
            continue
        nx, ny = max(b.x - x0, 0.0), max(b.y - y0, 0.0)
        nw = min(b.x - x0 + b.w, float(cw)) - nx
        nh = min(b.y - y0 + b.h, float(ch)) - ny
        if nw > 0 and nh > 0:
            out.append(BoundingBox(x=nx, y=ny, w=nw, h=nh, visible_ratio=b.visible_ratio))
    return cropped, out


def train(
    cfg: RunConfig,
    records: list[DatasetRecord] | None = None,
) -> TrainResult:
    """Joint training of detection plus both context self-supervisions.

    Deterministic for a fixed config and seed; the pseudo-labeling encoder
    is auditable via its parameter hash before and after the run.
    """
    apply_determinism_mode()
    if records is None:
        if not cfg.dataset:
            raise ValueError("config must set dataset (or pass records)")
        records = load_dataset(cfg.dataset, cfg.pseudo_dir)
    if not records:
        raise ValueError("training requires a non-empty dataset")

    dtype = cfg.torch_dtype()
    frozen = frozen_encoder_for(cfg)
    hash_before = parameter_hash(frozen)

    model = VlpdModel(cfg)
    if parameter_hash(model.encoder) != hash_before:
        raise RuntimeError("trainee encoder failed to replicate the frozen initialization")
    class_names = model.class_names
    vectors = encode_class_prompts(
        class_names, cfg.prompt_template, d_prime=cfg.d_prime, seed=cfg.seed
    )

    images = [_load_standardized(r.image_path, cfg) for r in records]
    dims = {img.shape for img in images}
    if len(dims) != 1:
        raise ValueError(f"training images must share dims, found {sorted(dims)}")
    pseudo: list[torch.Tensor] = []
    for record, image in zip(records, images):
        if record.pseudo_path is not None:
            arr = load_tensor_container(record.pseudo_path)
        else:
            arr = generate_pseudo_labels(torch.from_numpy(image).to(dtype), frozen, vectors)
        pseudo.append(torch.from_numpy(np.ascontiguousarray(arr)).to(dtype))

    grid = (images[0].shape[-2] // cfg.stride, images[0].shape[-1] // cfg.stride)
    targets = [build_targets(r.boxes, grid, cfg.stride, dtype=dtype) for r in records]

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1000))
    augmented = cfg.augment_hflip or cfg.augment_crop

    log_rows: list[LogRow] = []
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "loss_log.tsv", "w", encoding="utf-8")
        log_fh.write(LOG_HEADER + "\n")

    try:
        for iteration in range(cfg.iterations):
            idx = rng.choice(len(records), size=min(cfg.batch_size, len(records)), replace=False)
            batch_images, batch_targets, batch_pseudo = [], [], []
            for i in idx:
                if augmented:
                    image, boxes = images[i], records[i].boxes
                    if cfg.augment_crop and cfg.crop_dims is not None:
                        image, boxes = _crop_sample(image, boxes, cfg.crop_dims, rng)
                    if cfg.augment_hflip and rng.uniform() < 0.5:
                        image, boxes = _hflip_sample(image, boxes)
                    tensor = torch.from_numpy(image).to(dtype)
                    lab = generate_pseudo_labels(tensor, frozen, vectors)
                    g = (image.shape[-2] // cfg.stride, image.shape[-1] // cfg.stride)
                    batch_images.append(tensor)
                    batch_targets.append(build_targets(boxes, g, cfg.stride, dtype=dtype))
                    batch_pseudo.append(torch.from_numpy(lab).to(dtype))
                else:
                    batch_images.append(torch.from_numpy(images[i]).to(dtype))
                    batch_targets.append(targets[i])
                    batch_pseudo.append(pseudo[i])

            stack = torch.stack(batch_images)
            out = model(stack)

            det_terms = []
            for b, tgt in enumerate(batch_targets):
                total, _ = detection_loss(
                    head_outputs_for_image(out["center"], out["scale"], out["offset"], b), tgt
                )
                det_terms.append(total)
            l_det = torch.stack(det_terms).mean()
            l_vls = torch.stack(
                [vls_loss(out["s_bar"][b], batch_pseudo[b]) for b in range(len(idx))]
            ).mean()

            gaussians = torch.stack([t.center for t in batch_targets])
            s_hat = temperature_softmax(out["s_dot"], cfg.tau_prime)
            bank = build_prototype_bank(out["e"], s_hat, gaussians)
            l_psc = psc_loss(out["e"], gaussians, bank, cfg.tau)

            try:
                total = combined_loss(l_det, l_vls, l_psc, cfg)
            except TrainingDivergedError as err:
                terms = ", ".join(
                    f"{n} {float(t.detach()):.6g}"
                    for n, t in (("detection", l_det), ("vls", l_vls), ("psc", l_psc))
                )
                raise TrainingDivergedError(
                    f"iteration {iteration}: {err} ({terms})"
                ) from err

            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            d, v, p = (float(t.detach()) for t in (l_det, l_vls, l_psc))
            row = LogRow(
                iteration=iteration,
                detection=d,
                vls=v,
                psc=p,
                combined=d + cfg.lambda1 * v + cfg.lambda2 * p,
            )
            log_rows.append(row)
            if log_fh is not None:
                log_fh.write(row.format() + "\n")
            if cfg.log_every and iteration % cfg.log_every == 0:
                logger.info(
                    "iter %d det %.4g vls %.4g psc %.4g combined %.4g",
                    iteration, d, v, p, row.combined,
                )
    finally:
        if log_fh is not None:
            log_fh.close()

    hash_after = parameter_hash(frozen)
    if hash_after != hash_before:
        raise RuntimeError("frozen encoder parameters changed during training")

    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoint"
        save_checkpoint(ckpt_dir, model, cfg, cfg.iterations)
    return TrainResult(
        checkpoint_dir=ckpt_dir,
        log_rows=log_rows,
        frozen_hash_before=hash_before,
        frozen_hash_after=hash_after,
        model=model,
    )


def save_checkpoint(path: str | Path, model: VlpdModel, cfg: RunConfig, iteration: int) -> Path:
    """Persist the model as tensor containers plus a JSON manifest."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, tensor) in enumerate(sorted(model.state_dict().items())):
        rel = f"params/p{i:04d}.vlt"
        save_tensor_container(tensor.detach().cpu().numpy(), path / rel)
        entries.append({"name": name, "file": rel})
    manifest = {
        "format": 1,
        "iteration": iteration,
        "config": cfg.to_dict(),
        "class_names": model.class_names,
        "params": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> tuple[VlpdModel, RunConfig, int]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(manifest["config"])
    model = VlpdModel(cfg)
    state = {}
    for entry in manifest["params"]:
        arr = load_tensor_container(path / entry["file"])
        state[entry["name"]] = torch.from_numpy(arr)
    model.load_state_dict(state)
    model.eval()
    return model, cfg, int(manifest["iteration"])


def _pad_to_multiple(image: np.ndarray, multiple: int = 32) -> np.ndarray:
    h, w = image.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect")


def _clip_box(box: BoundingBox, dims: tuple[int, int]) -> BoundingBox | None:
    h, w = dims
    x0, y0 = max(box.x, 0.0), max(box.y, 0.0)
    x1, y1 = min(box.x2, float(w)), min(box.y2, float(h))
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return BoundingBox(x=x0, y=y0, w=x1 - x0, h=y1 - y0, score=box.score)


def detect(
    model: VlpdModel,
    image: np.ndarray,
    cfg: RunConfig,
    threshold: float | None = None,
) -> list[BoundingBox]:
    """Run inference on one [3, H, W] image in [0, 1]; returns final boxes.

    Images with dims not divisible by 32 are reflection-padded on the
    bottom/right and the decoded boxes are clipped back.
    """
    apply_determinism_mode()
    threshold = cfg.score_threshold if threshold is None else threshold
    dims = image.shape[-2:]
    arr = standardize(image, cfg.image_mean, cfg.image_std)
    arr = _pad_to_multiple(arr.astype(np.float64 if cfg.dtype == "float64" else np.float32))
    model.eval()
    with torch.no_grad():
        out = model(torch.from_numpy(arr).to(cfg.torch_dtype()).unsqueeze(0))
        head = head_outputs_for_image(out["center"], out["scale"], out["offset"], 0)
        raw = decode_boxes(head, threshold, cfg.stride, cfg.aspect_ratio)
    clipped = [b for b in (_clip_box(box, dims) for box in raw) if b is not None]
    return nms(clipped, cfg.nms_iou)


def evaluate_checkpoint(
    checkpoint: str | Path,
    dataset_root: str | Path,
    subset_names: list[str],
    threshold: float | None = None,
    iou_thr: float = 0.5,
    skip_undefined: bool = False,
) -> tuple[EvalReport, dict[str, list[BoundingBox]]]:
    """Detect over a dataset and score the named subsets."""
    model, cfg, _ = load_checkpoint(checkpoint)
    records = load_dataset(dataset_root)
    dets_by_image: dict[str, list[BoundingBox]] = {}
    gts_by_image: dict[str, list[BoundingBox]] = {}
    for record in records:
        image = load_image(record.image_path)
        dets_by_image[record.image_id] = detect(model, image, cfg, threshold)
        gts_by_image[record.image_id] = record.boxes
    report = evaluate_subsets(
        dets_by_image, gts_by_image, subset_names, iou_thr, skip_undefined
    )
    return report, dets_by_image


def write_eval_outputs(
    report: EvalReport,
    dets_by_image: dict[str, list[BoundingBox]],
    out_prefix: str | Path,
    figure: bool = True,
) -> list[Path]:
    """Write the delimited report, the detection file, and the curve figure."""
    from .evaluation import write_report
    from .plotting import plot_report

    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    outputs = []
    report_path = out_prefix.with_suffix(".tsv")
    write_report(report, report_path)
    outputs.append(report_path)
    det_path = out_prefix.with_name(out_prefix.name + "_detections.txt")
    write_detections(dets_by_image, det_path)
    outputs.append(det_path)
    if figure:
        fig_path = out_prefix.with_suffix(".png")
        plot_report(report, fig_path)
        outputs.append(fig_path)
    return outputs
