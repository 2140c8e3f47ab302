"""OOD evaluation: pixel-level AuPRC / FPR95, segment-level sIoU / PPV / F1, ECE.

OOD is the positive class throughout and higher scores mean "more OOD".
Pixels sharing a score always cross a threshold together.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

DEFAULT_SEGMENT_THRESHOLDS = tuple(round(0.25 + 0.05 * i, 2) for i in range(11))
SEGMENT_CUTOFF = 0.25
DEFAULT_ECE_BINS = 15


class MetricError(ValueError):
    pass


@dataclass
class ScoredPixels:
    scores: np.ndarray
    is_ood: np.ndarray
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.is_ood = np.asarray(self.is_ood).astype(bool).ravel()
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.scores.shape, dtype=bool)
        else:
            self.valid_mask = np.asarray(self.valid_mask).astype(bool).ravel()
        if not (self.scores.shape == self.is_ood.shape == self.valid_mask.shape):
            raise MetricError(
                f"array lengths differ: scores {self.scores.size}, is_ood {self.is_ood.size}, "
                f"valid_mask {self.valid_mask.size}"
            )

    def valid(self) -> tuple[np.ndarray, np.ndarray]:
        s = self.scores[self.valid_mask]
        y = self.is_ood[self.valid_mask]
        if np.any(~np.isfinite(s)):
            raise MetricError("scores contain non-finite values")
        n_pos = int(y.sum())
        if n_pos == 0 or n_pos == y.size:
            raise MetricError(
                f"need at least one positive and one negative valid pixel, got {n_pos} of {y.size}"
            )
        return s, y


def _grouped_counts(data: ScoredPixels):
    """Distinct thresholds (descending) with cumulative TP and FP at each."""
    s, y = data.valid()
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(ends, s.size - 1)
    return s[ends], tp[ends], fp[ends], int(tp[-1]), int(fp[-1])


def precision_recall_curve(data: ScoredPixels) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) per distinct score, thresholds descending."""
    thr, tp, fp, n_pos, _ = _grouped_counts(data)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return [(float(t), float(p), float(r)) for t, p, r in zip(thr, precision, recall)]


def auprc(curve: Sequence[tuple[float, float, float]]) -> float:
    """Step-wise area: sum over points of (recall increment) * precision."""
    if len(curve) == 0:
        raise MetricError("empty precision-recall curve")
    area = 0.0
    prev_recall = 0.0
    for _, precision, recall in curve:
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def fpr_at_95_tpr(data: ScoredPixels) -> float:
    """FPR at the largest threshold whose TPR reaches 95%."""
    _, tp, fp, n_pos, n_neg = _grouped_counts(data)
    # integer form of tp / n_pos >= 0.95
    hit = np.flatnonzero(tp * 100 >= 95 * n_pos)
    return float(fp[hit[0]] / n_neg)


# ---------------------------------------------------------------------------
# output-based scores; probability maps are (C, H, W) or (N, C, H, W) with the
# class axis given by ``axis``


def ood_score_uncertainty(uncertainty_map) -> np.ndarray:
    """Vacuity C / S is the score itself."""
    return np.asarray(uncertainty_map, dtype=np.float64)


def ood_score_max_softmax(prob_map, axis: int = 0) -> np.ndarray:
    return 1.0 - np.asarray(prob_map, dtype=np.float64).max(axis=axis)


def ood_score_entropy(prob_map, axis: int = 0) -> np.ndarray:
    p = np.asarray(prob_map, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


# ---------------------------------------------------------------------------
# segments

_STRUCTURES = {
    8: np.ones((3, 3), dtype=bool),
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
}


def connected_components(mask, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label components 1..K in row-major first-encounter order."""
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    labels, count = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    return labels.astype(np.int32), int(count)


@dataclass
class ThresholdRow:
    threshold: float
    mean_sIoU: float
    mean_PPV: float  # nan when no predicted components exist
    f1: float
    tp: int
    fp: int
    fn: int
    num_pred: int


@dataclass
class SegmentMatchReport:
    mean_sIoU: float
    mean_PPV: float
    mean_F1: float
    rows: list[ThresholdRow] = field(default_factory=list)


def _image_segment_stats(pred: np.ndarray, gt_lab: np.ndarray, n_gt: int):
    """Per-gt sIoU values and per-prediction PPV values for one image."""
    pred_lab, n_pred = connected_components(pred)
    gt_any = gt_lab > 0
    sious = []
    for k in range(1, n_gt + 1):
        seg = gt_lab == k
        hit = np.unique(pred_lab[seg])
        hit = hit[hit > 0]
        if hit.size == 0:
            sious.append(0.0)
            continue
        pred_union = np.isin(pred_lab, hit)
        inter = np.count_nonzero(seg & pred_union)
        # predicted pixels inside other gt segments are not counted against k
        other = pred_union & gt_any & ~seg
        union = np.count_nonzero(seg | pred_union) - np.count_nonzero(other)
        sious.append(inter / union)
    ppvs = []
    if n_pred:
        sizes = np.bincount(pred_lab.ravel(), minlength=n_pred + 1)
        inside = np.bincount(pred_lab[gt_any], minlength=n_pred + 1)
        ppvs = list(inside[1:] / sizes[1:])
    return sious, ppvs


def segment_level_metrics(
    score_maps: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    thresholds: Sequence[float] = DEFAULT_SEGMENT_THRESHOLDS,
    cutoff: float = SEGMENT_CUTOFF,
) -> SegmentMatchReport:
    """Component-level sIoU / PPV / F1 averaged over the threshold list.

    At each threshold the score maps are binarized with ``score >= t``. A gt
    segment is a true positive if its sIoU reaches ``cutoff``; a predicted
    component is a false positive if its PPV is below ``cutoff``. PPV values are
    pooled over every (threshold, component) pair; with no components at all
    the mean PPV is 0.
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise MetricError("threshold list is empty")
    if len(score_maps) != len(gt_masks):
        raise MetricError(f"{len(score_maps)} score maps but {len(gt_masks)} gt masks")
    gts = [connected_components(g) for g in gt_masks]
    if sum(n for _, n in gts) == 0:
        raise MetricError("no ground-truth OOD segments in the evaluation set")
    rows = []
    pooled_ppv: list[float] = []
    for t in thresholds:
        sious: list[float] = []
        ppvs: list[float] = []
        for score, (gt_lab, n_gt) in zip(score_maps, gts):
            score = np.asarray(score)
            if score.shape != gt_lab.shape:
                raise MetricError(f"score map shape {score.shape} != gt shape {gt_lab.shape}")
            si, pp = _image_segment_stats(score >= t, gt_lab, n_gt)
            sious.extend(si)
            ppvs.extend(pp)
        tp = sum(1 for v in sious if v >= cutoff)
        fn = len(sious) - tp
        fp = sum(1 for v in ppvs if v < cutoff)
        denom = 2 * tp + fp + fn
        rows.append(
            ThresholdRow(
                threshold=float(t),
                mean_sIoU=float(np.mean(sious)),
                mean_PPV=float(np.mean(ppvs)) if ppvs else math.nan,
                f1=2 * tp / denom if denom else 0.0,
                tp=tp,
                fp=fp,
                fn=fn,
                num_pred=len(ppvs),
            )
        )
        pooled_ppv.extend(ppvs)
    return SegmentMatchReport(
        mean_sIoU=float(np.mean([r.mean_sIoU for r in rows])),
        mean_PPV=float(np.mean(pooled_ppv)) if pooled_ppv else 0.0,
        mean_F1=float(np.mean([r.f1 for r in rows])),
        rows=rows,
    )


# ---------------------------------------------------------------------------
# calibration


def ece(prob_maps, label_maps, bins: int = DEFAULT_ECE_BINS, valid_mask=None, axis: int = 1) -> float:
    """Expected calibration error with equal-width confidence bins (lo, hi].

    ``prob_maps`` is (N, C, H, W) by default; ``valid_mask`` (same shape as the
    labels) selects the in-distribution pixels to score.
    """
    if bins < 1:
        raise MetricError(f"bins must be >= 1, got {bins}")
    p = np.asarray(prob_maps, dtype=np.float64)
    labels = np.asarray(label_maps)
    conf = p.max(axis=axis)
    pred = p.argmax(axis=axis)
    if conf.shape != labels.shape:
        raise MetricError(f"labels shape {labels.shape} does not match probabilities {p.shape}")
    keep = np.ones(labels.shape, dtype=bool) if valid_mask is None else np.asarray(valid_mask).astype(bool)
    conf, correct = conf[keep], (pred == labels)[keep]
    if conf.size == 0:
        raise MetricError("no valid pixels for ECE")
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    n_b = np.bincount(idx, minlength=bins)
    conf_b = np.bincount(idx, weights=conf, minlength=bins)
    acc_b = np.bincount(idx, weights=correct.astype(np.float64), minlength=bins)
    nz = n_b > 0
    gaps = np.abs(acc_b[nz] - conf_b[nz])  # n_b * |acc - conf|
    return float(gaps.sum() / conf.size)


# ---------------------------------------------------------------------------
# end-to-end evaluation


def _score_uncertainty(probs, unc):
    return ood_score_uncertainty(unc)


def _score_max_softmax(probs, unc):
    return ood_score_max_softmax(probs, axis=0)


def _score_entropy(probs, unc):
    return ood_score_entropy(probs, axis=0)


METHODS: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "uncertainty": _score_uncertainty,
    "max_softmax": _score_max_softmax,
    "entropy": _score_entropy,
}

REPORT_COLUMNS = ("method", "AuPRC", "FPR95", "sIoU", "PPV", "F1", "ECE", "images")


@dataclass(frozen=True)
class EvalReport:
    method: str
    auprc: float
    fpr95: float
    mean_sIoU: float
    mean_PPV: float
    mean_F1: float
    ece: float
    num_images: int

    def row(self) -> str:
        vals = (self.auprc, self.fpr95, self.mean_sIoU, self.mean_PPV, self.mean_F1, self.ece)
        return "\t".join([self.method] + [f"{v:.6f}" for v in vals] + [str(self.num_images)])


def format_report(reports: Sequence[EvalReport]) -> str:
    return "\n".join(["\t".join(REPORT_COLUMNS)] + [r.row() for r in reports]) + "\n"


def evaluate(
    net,
    samples,
    methods: Sequence[str] = ("uncertainty",),
    thresholds: Sequence[float] = DEFAULT_SEGMENT_THRESHOLDS,
    workers: int = 1,
    ece_bins: int = DEFAULT_ECE_BINS,
) -> list[EvalReport]:
    """Score every eval sample with each method and compute the metric suite.

    ``net`` is a SegNet or anything ``nn_engine.predict`` accepts. Per-image
    prediction may run on ``workers`` threads; results are gathered in sample
    order so the report does not depend on the worker count.
    """
    from .nn_engine import SegNet, load_checkpoint, predict

    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise MetricError(f"unknown method(s) {unknown}; valid: {sorted(METHODS)}")
    if not methods:
        raise MetricError("no methods requested")
    if not isinstance(net, SegNet):
        net = load_checkpoint(net)
    if not samples:
        raise MetricError("evaluation split is empty")

    def run(sample):
        b = predict(net, sample.image)
        return b.probabilities.astype(np.float64), b.uncertainty.astype(np.float64)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            beliefs = list(pool.map(run, samples))
    else:
        beliefs = [run(s) for s in samples]

    probs = np.stack([b[0] for b in beliefs])
    labels = np.stack([s.labels for s in samples])
    masks = np.stack([s.ood_mask for s in samples]).astype(bool)
    ece_value = ece(probs, labels, ece_bins, valid_mask=~masks)

    reports = []
    for name in methods:
        try:
            scores = [METHODS[name](p, u) for p, u in beliefs]
            pix = ScoredPixels(np.concatenate([s.ravel() for s in scores]), masks.ravel())
            seg = segment_level_metrics(scores, list(masks), thresholds)
            reports.append(
                EvalReport(
                    name,
                    auprc(precision_recall_curve(pix)),
                    fpr_at_95_tpr(pix),
                    seg.mean_sIoU,
                    seg.mean_PPV,
                    seg.mean_F1,
                    ece_value,
                    len(samples),
                )
            )
        except MetricError as exc:
            raise MetricError(f"method {name!r}: {exc}") from exc
    return reports


# ---------------------------------------------------------------------------
# heatmaps


def write_pgm16(path, values) -> bytes:
    """Write a map with entries in [0, 1] as a 16-bit binary PGM (big-endian samples)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {v.shape}")
    q = np.round(np.clip(v, 0.0, 1.0) * 65535.0).astype(">u2")
    h, w = v.shape
    payload = f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes()
    if path is not None:
        Path(path).write_bytes(payload)
    return payload


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM, 8- or 16-bit; returns the raw integer samples."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < n:
        raise ValueError("truncated PGM payload")
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)
