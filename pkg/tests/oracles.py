"""Independent scalar-loop reference implementations and gradient tools.

Everything here is deliberately slow and literal: plain Python loops over
numpy values, no shared code with the library paths they check.
"""

import math

import numpy as np


def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Max of |a-b| / max(floor, |a|, |b|); the floor keeps tiny entries honest."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def cosine_map_oracle(v: np.ndarray, l: np.ndarray) -> np.ndarray:
    hp, wp, d = v.shape
    n = l.shape[0]
    out = np.zeros((hp, wp, n))
    for i in range(hp):
        for j in range(wp):
            for c in range(n):
                num = 0.0
                nv = 0.0
                nl = 0.0
                for k in range(d):
                    num += v[i, j, k] * l[c, k]
                    nv += v[i, j, k] ** 2
                    nl += l[c, k] ** 2
                nv, nl = math.sqrt(nv), math.sqrt(nl)
                out[i, j, c] = 0.0 if nv < 1e-12 or nl < 1e-12 else num / (nv * nl)
    return out


def smooth_l1_scalar(x: float) -> float:
    return 0.5 * x * x if abs(x) < 1.0 else abs(x) - 0.5


def vls_oracle(pred: np.ndarray, target: np.ndarray) -> float:
    hp, wp, n = pred.shape
    total = 0.0
    for i in range(hp):
        for j in range(wp):
            for c in range(n):
                total += smooth_l1_scalar(pred[i, j, c] - target[i, j, c])
    return total / (hp * wp * n)


def aggregate_oracle(e: np.ndarray, weights: np.ndarray) -> np.ndarray:
    d, h, w = e.shape
    k = weights.shape[-1]
    out = np.zeros((k, d))
    for kk in range(k):
        for dd in range(d):
            for i in range(h):
                for j in range(w):
                    out[kk, dd] += e[dd, i, j] * weights[i, j, kk]
    return out


def psc_oracle(
    features: np.ndarray, gaussians: np.ndarray, negatives: np.ndarray,
    positives: np.ndarray, neg_valid: np.ndarray, tau: float,
) -> float:
    """Scalar contrastive loss over all Gaussian-positive queries."""

    def unit(vec):
        norm = math.sqrt(sum(x * x for x in vec))
        return [x / max(norm, 1e-12) for x in vec]

    flat_negs = []
    for b in range(negatives.shape[0]):
        for c in range(negatives.shape[1]):
            if neg_valid[b, c]:
                flat_negs.append(unit(list(negatives[b, c])))

    total = 0.0
    count = 0
    for b in range(features.shape[0]):
        pos = unit(list(positives[b]))
        for i in range(gaussians.shape[1]):
            for j in range(gaussians.shape[2]):
                if gaussians[b, i, j] <= 0:
                    continue
                q = unit(list(features[b, :, i, j]))
                qp = sum(a * c for a, c in zip(q, pos)) / tau
                denom = math.exp(qp)
                for neg in flat_negs:
                    denom += math.exp(sum(a * c for a, c in zip(q, neg)) / tau)
                total += -math.log(math.exp(qp) / denom)
                count += 1
    return total / count if count else 0.0


def detection_loss_oracle(
    center_logits: np.ndarray, scale_pred: np.ndarray, offset_pred: np.ndarray,
    center_tgt: np.ndarray, scale_tgt: np.ndarray, offset_tgt: np.ndarray,
    pos_mask: np.ndarray,
) -> float:
    h, w = center_logits.shape
    n_pos = int(pos_mask.sum())
    norm = max(1, n_pos)
    center_sum = 0.0
    for i in range(h):
        for j in range(w):
            p = 1.0 / (1.0 + math.exp(-center_logits[i, j]))
            if pos_mask[i, j]:
                center_sum += (1.0 - p) ** 2 * math.log(max(p, 1e-12))
            else:
                center_sum += (
                    (1.0 - center_tgt[i, j]) ** 4 * p**2 * math.log(max(1.0 - p, 1e-12))
                )
    l_center = -center_sum / norm
    l_scale = 0.0
    l_offset = 0.0
    if n_pos:
        for i in range(h):
            for j in range(w):
                if pos_mask[i, j]:
                    l_scale += smooth_l1_scalar(scale_pred[i, j] - scale_tgt[i, j])
                    l_offset += smooth_l1_scalar(offset_pred[i, j, 0] - offset_tgt[i, j, 0])
                    l_offset += smooth_l1_scalar(offset_pred[i, j, 1] - offset_tgt[i, j, 1])
        l_scale /= n_pos
        l_offset /= n_pos
    return 0.01 * l_center + 1.0 * l_scale + 0.1 * l_offset


def iou_scalar(a, b) -> float:
    ix = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    iy = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def greedy_match_oracle(dets, gts, ignores, thr=0.5):
    """dets: (x, y, w, h, score); gts/ignores: (x, y, w, h). Returns labels."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i][4])
    labels = ["fp"] * len(dets)
    taken = [False] * len(gts)
    for di in order:
        best, best_ov = -1, -1.0
        for gi in range(len(gts)):
            if taken[gi]:
                continue
            ov = iou_scalar(dets[di][:4], gts[gi])
            if ov >= thr and ov > best_ov:
                best, best_ov = gi, ov
        if best >= 0:
            taken[best] = True
            labels[di] = "tp"
            continue
        for ign in ignores:
            if iou_scalar(dets[di][:4], ign) >= thr:
                labels[di] = "ignored"
                break
    return labels


def lamr_oracle(dets_by_image, gts_by_image, spec, thr=0.5):
    """Threshold-by-threshold re-matched log-average miss rate.

    dets are (x, y, w, h, score) tuples; gts are (x, y, w, h, visible)
    tuples. `spec` has h_min/h_max/v_min/v_max attributes.
    """
    n_images = len(gts_by_image)
    split = {}
    n_gt = 0
    for image_id, gts in gts_by_image.items():
        ev, ig = [], []
        for g in gts:
            if spec.h_min <= g[3] <= spec.h_max and spec.v_min <= g[4] <= spec.v_max:
                ev.append(g[:4])
            else:
                ig.append(g[:4])
        split[image_id] = (ev, ig)
        n_gt += len(ev)
    assert n_gt > 0

    scores = sorted(
        {d[4] for dets in dets_by_image.values() for d in dets}, reverse=True
    )
    points = []
    for t in scores:
        tp = fp = 0
        for image_id, (ev, ig) in split.items():
            dets = [d for d in dets_by_image.get(image_id, []) if d[4] >= t]
            labels = greedy_match_oracle(dets, ev, ig, thr)
            tp += sum(1 for lab in labels if lab == "tp")
            fp += sum(1 for lab in labels if lab == "fp")
        points.append((fp / n_images, (n_gt - tp) / n_gt))

    logs = []
    for ref in np.logspace(-2, 0, 9):
        mr = 1.0
        candidates = [miss for fppi, miss in points if fppi <= ref]
        if candidates:
            mr = min(candidates)
        logs.append(math.log(max(mr, 1e-10)))
    return math.exp(sum(logs) / len(logs))
