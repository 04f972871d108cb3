"""Occupancy and anomaly evaluation: IoU family, AuROC, dilated AuPRC, ECE."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .voxel_core import EMPTY, IGNORE, ClassCatalog, GridDims

DEFAULT_RADII = (0.8, 1.0, 1.2)
ECE_BINS = 15
_RADIUS_TOL = 1e-9


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AnomalyGroundTruth:
    dims: GridDims
    is_ood: np.ndarray  # (n_voxels,) bool

    def __post_init__(self):
        mask = np.asarray(self.is_ood, dtype=bool).reshape(-1)
        if mask.size != self.dims.n_voxels:
            raise ValueError("anomaly mask does not match grid")
        object.__setattr__(self, "is_ood", mask)

    @property
    def voxel_size(self):
        return self.dims.voxel_size


@dataclass
class MetricReport:
    iou_per_class: dict = field(default_factory=dict)
    miou: float = float("nan")
    tail_miou: float = float("nan")
    geo_iou: float = float("nan")
    auroc: float = float("nan")
    auprc_r: dict = field(default_factory=dict)
    ece_sem: float = float("nan")
    ece_tail: float = float("nan")
    ece_geo: float = float("nan")

    def rows(self):
        """``(metric, value, param)`` triples in a stable order; unset metrics are skipped."""
        out = [("iou", v, str(k)) for k, v in sorted(self.iou_per_class.items())]
        for name in ("miou", "tail_miou", "geo_iou", "auroc"):
            out.append((name, getattr(self, name), ""))
        out += [("auprc_r", v, f"{r:g}") for r, v in sorted(self.auprc_r.items())]
        for name in ("ece_sem", "ece_tail", "ece_geo"):
            out.append((name, getattr(self, name), ""))
        return [row for row in out if not np.isnan(row[1])]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value", "param"])
        for metric, value, param in self.rows():
            writer.writerow([metric, repr(float(value)), param])
        return buf.getvalue()


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def iou(pred, gt, catalog: ClassCatalog):
    """Per-class IoU, mIoU over ``1..k_cls``, tail mIoU, and geometric IoU.

    Voxels whose ground truth is IGNORE are dropped. A class with empty union
    scores 0 and still counts in the means.
    """
    p = np.asarray(pred).reshape(-1)
    g = np.asarray(gt).reshape(-1)
    _check_same_shape(p, g)
    keep = g != IGNORE
    p, g = p[keep], g[keep]
    per_class = {}
    for k in range(1, catalog.k_cls + 1):
        inter = np.count_nonzero((p == k) & (g == k))
        union = np.count_nonzero((p == k) | (g == k))
        per_class[k] = inter / union if union else 0.0
    occ_p, occ_g = p != EMPTY, g != EMPTY
    union = np.count_nonzero(occ_p | occ_g)
    geo = np.count_nonzero(occ_p & occ_g) / union if union else 0.0
    tail = sorted(catalog.tail_set)
    tail_miou = float(np.mean([per_class[k] for k in tail])) if tail else float("nan")
    return {
        "iou_per_class": per_class,
        "miou": float(np.mean(list(per_class.values()))),
        "tail_miou": tail_miou,
        "geo_iou": float(geo),
    }


def auroc(scores, labels) -> float:
    """Mann-Whitney AuROC; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=bool).reshape(-1)
    _check_same_shape(s, y)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AuROC needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def dilate(gt: AnomalyGroundTruth, radius_m) -> np.ndarray:
    """Voxels whose centre lies within ``radius_m`` metres of an OOD voxel centre."""
    if radius_m < 0:
        raise ValueError("radius must be non-negative")
    mask = gt.is_ood.reshape(gt.dims.shape)
    if not mask.any() or radius_m == 0:
        return gt.is_ood.copy()
    dist = ndimage.distance_transform_edt(~mask)
    return (dist <= radius_m / gt.voxel_size + _RADIUS_TOL).reshape(-1)


def precision_recall_curve(scores, gt: AnomalyGroundTruth, radius_m):
    """Precision/recall at every unique score threshold, highest first.

    A voxel predicted positive is a true positive iff it lies in the dilated
    mask; recall counts original OOD voxels at or above the threshold.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    _check_same_shape(s, gt.is_ood)
    n_ood = int(gt.is_ood.sum())
    if n_ood == 0:
        raise UndefinedMetricError("AuPRC_r needs at least one OOD voxel")
    dilated = dilate(gt, radius_m)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    tp = np.cumsum(dilated[order])
    hits = np.cumsum(gt.is_ood[order])
    # last position of each distinct score value
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    precision = tp[ends] / (ends + 1)
    recall = hits[ends] / n_ood
    return precision, recall, s_sorted[ends]


def auprc_r(scores, gt: AnomalyGroundTruth, radius_m) -> float:
    precision, recall, _ = precision_recall_curve(scores, gt, radius_m)
    r = np.r_[0.0, recall]
    p = np.r_[1.0, precision]
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def ece(confidences, correct, n_bins=ECE_BINS) -> float:
    """Equal-width-bin expected calibration error; bins are ``(lo, hi]`` with 0 in the first."""
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    hit = np.asarray(correct, dtype=np.float64).reshape(-1)
    _check_same_shape(conf, hit)
    if conf.size == 0:
        raise UndefinedMetricError("ECE over an empty population")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    bins = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        in_bin = bins == b
        n_b = np.count_nonzero(in_bin)
        if n_b:
            total += n_b / conf.size * abs(hit[in_bin].mean() - conf[in_bin].mean())
    return float(total)


def ece_subset(probs, gt, subset, catalog: ClassCatalog = None, n_bins=ECE_BINS) -> float:
    """ECE variants from ``(n_voxels, k_cls + 1)`` class probabilities.

    ``sem``: non-empty ground truth, top-1 confidence of the K-way class
    distribution (columns ``1..k_cls`` renormalized).
    ``tail``: as ``sem`` restricted to tail-class ground truth.
    ``geo``: occupied-vs-free confidence ``max(p_occ, 1 - p_occ)`` with
    ``p_occ = 1 - probs[:, 0]`` on every labelled voxel.
    """
    probs = np.asarray(probs, dtype=np.float64)
    g = np.asarray(gt).reshape(-1)
    labelled = g != IGNORE
    if subset == "geo":
        p_occ = 1.0 - probs[labelled, 0]
        conf = np.maximum(p_occ, 1.0 - p_occ)
        correct = (p_occ > 0.5) == (g[labelled] != EMPTY)
        return ece(conf, correct, n_bins)
    if subset == "sem":
        keep = labelled & (g != EMPTY)
    elif subset == "tail":
        if catalog is None:
            raise ValueError("tail ECE needs a class catalog")
        keep = np.isin(g, sorted(catalog.tail_set))
    else:
        raise ValueError(f"unknown ECE subset {subset!r}")
    cls = probs[keep, 1:]
    cls = cls / np.maximum(cls.sum(axis=1, keepdims=True), np.finfo(float).tiny)
    conf = cls.max(axis=1)
    correct = cls.argmax(axis=1) + 1 == g[keep]
    return ece(conf, correct, n_bins)


def evaluate(pred, probs, gt_labels, catalog, scores=None, anomaly=None,
             radii=DEFAULT_RADII) -> MetricReport:
    """Assemble a :class:`MetricReport`; anomaly metrics only when scores and OOD truth are given."""
    report = MetricReport(**iou(pred, gt_labels, catalog))
    if probs is not None:
        report.ece_sem = ece_subset(probs, gt_labels, "sem")
        report.ece_geo = ece_subset(probs, gt_labels, "geo")
        if catalog.tail_set and np.isin(np.asarray(gt_labels), sorted(catalog.tail_set)).any():
            report.ece_tail = ece_subset(probs, gt_labels, "tail", catalog)
    if scores is not None and anomaly is not None:
        report.auroc = auroc(scores, anomaly.is_ood)
        report.auprc_r = {float(r): auprc_r(scores, anomaly, r) for r in radii}
    return report
