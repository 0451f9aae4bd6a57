"""FPPI / miss-rate evaluation with occlusion subsets.

The protocol: greedy-match detections against ground truth per image,
sweep score thresholds to trace the (FPPI, miss rate) curve, sample the
miss rate at 9 log-uniform FPPI references in [1e-2, 1e0], and report the
geometric mean (the log-average miss rate). Out-of-subset ground truth
becomes ignore regions that neither score nor penalize.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import BoundingBox, iou

logger = logging.getLogger(__name__)

MISS_RATE_FLOOR = 1e-10
FPPI_REFERENCES = tuple(float(v) for v in np.logspace(-2.0, 0.0, 9))


class UndefinedMetricError(ValueError):
    """Raised when a subset has no evaluated ground truth."""


@dataclass(frozen=True)
class SubsetSpec:
    """Height and visible-ratio ranges selecting which ground truth counts."""

    name: str
    h_min: float = 0.0
    h_max: float = math.inf
    v_min: float = 0.0
    v_max: float = 1.0

    def contains(self, box: BoundingBox) -> bool:
        if box.visible_ratio is None:
            raise ValueError(f"ground-truth box without visible_ratio: {box}")
        return (
            self.h_min <= box.h <= self.h_max
            and self.v_min <= box.visible_ratio <= self.v_max
        )


# Occlusion subsets keep the usual 50px height floor of the Reasonable set.
SUBSETS: dict[str, SubsetSpec] = {
    "Reasonable": SubsetSpec("Reasonable", h_min=50.0, v_min=0.65),
    "Small": SubsetSpec("Small", h_min=50.0, h_max=75.0, v_min=0.65),
    "HO": SubsetSpec("HO", h_min=50.0, v_min=0.2, v_max=0.65),
    "R+HO": SubsetSpec("R+HO", h_min=50.0, v_min=0.2),
    "Heavy": SubsetSpec("Heavy", h_min=50.0, v_min=0.0, v_max=0.65),
}


def filter_subset(
    gts: list[BoundingBox], spec: SubsetSpec
) -> tuple[list[BoundingBox], list[BoundingBox]]:
    """Split ground truth into evaluated boxes and ignore regions."""
    evaluated = [b for b in gts if spec.contains(b)]
    ignored = [b for b in gts if not spec.contains(b)]
    return evaluated, ignored


def match_detections(
    dets: list[BoundingBox],
    gts: list[BoundingBox],
    ignores: list[BoundingBox],
    iou_thr: float = 0.5,
) -> tuple[list[str], list[bool]]:
    """Greedy per-image matching.

    Detections are visited in descending score (ties keep input order).
    Each claims the highest-IoU unmatched ground truth at or above the
    threshold ("tp"), failing that the highest-IoU ignore region
    ("ignored"), and otherwise counts as "fp". Ground truth is claimed at
    most once; ignore regions may absorb any number of detections.

    Returns:
        Per-detection labels in input order, and per-gt matched flags.
    """
    order = sorted(range(len(dets)), key=lambda i: -(dets[i].score or 0.0))
    labels = ["fp"] * len(dets)
    matched = [False] * len(gts)
    for di in order:
        det = dets[di]
        best_gt, best_iou = -1, -1.0
        for gi, gt in enumerate(gts):
            if matched[gi]:
                continue
            ov = iou(det, gt)
            if ov >= iou_thr and ov > best_iou:
                best_gt, best_iou = gi, ov
        if best_gt >= 0:
            matched[best_gt] = True
            labels[di] = "tp"
            continue
        if any(iou(det, ign) >= iou_thr for ign in ignores):
            labels[di] = "ignored"
    return labels, matched


@dataclass
class CurvePoint:
    score: float
    fppi: float
    miss_rate: float
    tp: int
    fp: int
    fn: int


@dataclass
class SubsetResult:
    subset: str
    mr2: float
    num_gt: int
    num_images: int
    num_dets: int
    curve: list[CurvePoint] = field(default_factory=list)
    reference_miss_rates: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class EvalReport:
    results: dict[str, SubsetResult] = field(default_factory=dict)


def log_average_miss_rate(
    dets_by_image: dict[str, list[BoundingBox]],
    gts_by_image: dict[str, list[BoundingBox]],
    spec: SubsetSpec,
    iou_thr: float = 0.5,
) -> SubsetResult:
    """Log-average miss rate of a detection set on one subset.

    The image set (and so the FPPI denominator) is taken from
    ``gts_by_image``; detections for unknown images are ignored.
    """
    n_images = len(gts_by_image)
    scored: list[tuple[float, bool]] = []  # (score, is_tp)
    n_gt = 0
    for image_id, gts in gts_by_image.items():
        evaluated, ignored = filter_subset(gts, spec)
        n_gt += len(evaluated)
        dets = dets_by_image.get(image_id, [])
        labels, _ = match_detections(dets, evaluated, ignored, iou_thr)
        for det, label in zip(dets, labels):
            if label == "ignored":
                continue
            scored.append((det.score or 0.0, label == "tp"))
    if n_gt == 0:
        raise UndefinedMetricError(f"subset {spec.name!r} has no evaluated ground truth")

    scored.sort(key=lambda t: -t[0])
    curve: list[CurvePoint] = []
    tp = fp = 0
    i = 0
    while i < len(scored):
        j = i
        while j < len(scored) and scored[j][0] == scored[i][0]:
            tp += scored[j][1]
            fp += not scored[j][1]
            j += 1
        curve.append(
            CurvePoint(
                score=scored[i][0],
                fppi=fp / n_images,
                miss_rate=(n_gt - tp) / n_gt,
                tp=tp,
                fp=fp,
                fn=n_gt - tp,
            )
        )
        i = j

    refs: list[tuple[float, float]] = []
    logs = []
    for ref in FPPI_REFERENCES:
        mr = 1.0
        # Points arrive with non-decreasing FPPI and non-increasing miss
        # rate, so the last point at or below the reference is the best.
        for point in curve:
            if point.fppi <= ref:
                mr = point.miss_rate
            else:
                break
        refs.append((ref, mr))
        logs.append(math.log(max(mr, MISS_RATE_FLOOR)))
    mr2 = math.exp(sum(logs) / len(logs))
    return SubsetResult(
        subset=spec.name,
        mr2=mr2,
        num_gt=n_gt,
        num_images=n_images,
        num_dets=len(scored),
        curve=curve,
        reference_miss_rates=refs,
    )


def evaluate_subsets(
    dets_by_image: dict[str, list[BoundingBox]],
    gts_by_image: dict[str, list[BoundingBox]],
    subset_names: list[str],
    iou_thr: float = 0.5,
    skip_undefined: bool = False,
) -> EvalReport:
    """Score several subsets; an empty subset raises unless ``skip_undefined``."""
    report = EvalReport()
    for name in subset_names:
        if name not in SUBSETS:
            raise KeyError(f"unknown subset {name!r}; known: {sorted(SUBSETS)}")
        try:
            report.results[name] = log_average_miss_rate(
                dets_by_image, gts_by_image, SUBSETS[name], iou_thr
            )
        except UndefinedMetricError:
            if not skip_undefined:
                raise
            logger.warning("subset %r has no evaluated ground truth, skipping", name)
    return report


def write_report(report: EvalReport, path: str | Path) -> None:
    """Persist a report as tab-delimited records (summary / ref / point rows)."""
    lines = ["record\tsubset\tcol1\tcol2\tcol3\tcol4\tcol5\tcol6"]
    for res in report.results.values():
        lines.append(
            f"summary\t{res.subset}\t{res.mr2:.9g}\t{res.num_gt}"
            f"\t{res.num_images}\t{res.num_dets}\t\t"
        )
        for ref, mr in res.reference_miss_rates:
            lines.append(f"ref\t{res.subset}\t{ref:.9g}\t{mr:.9g}\t\t\t\t")
        for pt in res.curve:
            lines.append(
                f"point\t{res.subset}\t{pt.score:.9g}\t{pt.fppi:.9g}"
                f"\t{pt.miss_rate:.9g}\t{pt.tp}\t{pt.fp}\t{pt.fn}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> EvalReport:
    report = EvalReport()
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        kind, subset = parts[0], parts[1]
        if kind == "summary":
            report.results[subset] = SubsetResult(
                subset=subset,
                mr2=float(parts[2]),
                num_gt=int(parts[3]),
                num_images=int(parts[4]),
                num_dets=int(parts[5]),
            )
        elif kind == "ref":
            report.results[subset].reference_miss_rates.append(
                (float(parts[2]), float(parts[3]))
            )
        elif kind == "point":
            report.results[subset].curve.append(
                CurvePoint(
                    score=float(parts[2]),
                    fppi=float(parts[3]),
                    miss_rate=float(parts[4]),
                    tp=int(parts[5]),
                    fp=int(parts[6]),
                    fn=int(parts[7]),
                )
            )
        else:
            raise ValueError(f"{path}: unknown record kind {kind!r}")
    return report
