"""Frame-level detection metrics and diarization error rate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .errors import ConfigurationError, InputError, UndefinedMetricError


def _scored(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores but {y.size} labels")
    if not ((y == 0) | (y == 1)).all():
        raise InputError("labels must be 0/1")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("need at least one positive and one negative label")
    return s, y, n_pos


def _descending_counts(s, y):
    """Cumulative (tp, fp) at each distinct score, thresholds taken in descending order."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tp = np.cumsum(y_sorted)[last_of_group]
    fp = (last_of_group + 1) - tp
    return tp, fp, s_sorted[last_of_group]


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve: sum of (R_k - R_{k-1}) * P_k."""
    s, y, n_pos = _scored(scores, labels)
    tp, fp, _ = _descending_counts(s, y)
    precision = tp / (tp + fp)
    d_tp = np.diff(np.r_[0, tp])
    return float(np.sum(d_tp / n_pos * precision))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic P(s+ > s-) + P(tie)/2 via mid-rank summation."""
    s, y, n_pos = _scored(scores, labels)
    n_neg = y.size - n_pos
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def eer(scores, labels) -> float:
    """Equal error rate from a sweep over the distinct scores.

    At threshold ``th`` a negative is falsely accepted if its score >= th and
    a positive falsely rejected if its score < th.  The sweep runs over the
    distinct scores plus +inf; the result is the FAR where the (FAR, FRR)
    polyline crosses FAR == FRR, linearly interpolated between the two
    bracketing sweep points.
    """
    s, y, n_pos = _scored(scores, labels)
    n_neg = y.size - n_pos
    thresholds = np.r_[np.unique(s), np.inf]
    pos = np.sort(s[y == 1])
    neg = np.sort(s[y == 0])
    far = (n_neg - np.searchsorted(neg, thresholds, side="left")) / n_neg
    frr = np.searchsorted(pos, thresholds, side="left") / n_pos
    return _crossing(far, frr)


def _crossing(far, frr) -> float:
    d = far - frr
    k = int(np.argmax(d <= 0))
    if d[k] == 0 or k == 0:
        return float(far[k])
    t = d[k - 1] / (d[k - 1] - d[k])
    return float(far[k - 1] + t * (far[k] - far[k - 1]))


def frame_accuracy(scores, labels, threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise UndefinedMetricError("no frames")
    return float(np.mean((s >= threshold) == (y == 1)))


def overlap_precision_recall(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """Precision and recall of thresholded detections (the overlap-detector view)."""
    hyp = np.asarray(scores).ravel() >= threshold
    ref = np.asarray(labels).ravel() == 1
    tp = float(np.sum(hyp & ref))
    precision = tp / hyp.sum() if hyp.any() else 0.0
    recall = tp / ref.sum() if ref.any() else 0.0
    return precision, recall


# --------------------------------------------------------------------------- segmentation

@dataclass(frozen=True)
class Segment:
    speaker: str
    onset: float
    duration: float


def median_filter(x, window: int) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise ConfigurationError(f"median window must be odd and >= 1, got {window}")
    x = np.asarray(x, dtype=np.float64)
    if window == 1 or x.size == 0:
        return x.copy()
    half = window // 2
    padded = np.pad(x, half, mode="edge")
    return np.median(np.lib.stride_tricks.sliding_window_view(padded, window), axis=-1)


def runs_of(mask) -> list[tuple[int, int]]:
    """(start, end) frame index pairs of the True runs, end exclusive."""
    m = np.r_[False, np.asarray(mask, dtype=bool), False]
    edges = np.flatnonzero(np.diff(m.astype(np.int8)))
    return list(zip(edges[0::2].tolist(), edges[1::2].tolist()))


def binarize_track(probs, threshold: float = 0.5, median_window: int = 11,
                   frame_rate: float = 25.0, speaker: str = "target") -> list[Segment]:
    smoothed = median_filter(probs, median_window)
    return [Segment(str(speaker), a / frame_rate, (b - a) / frame_rate)
            for a, b in runs_of(smoothed >= threshold)]


def binarized_frames(probs, threshold: float = 0.5, median_window: int = 11) -> np.ndarray:
    return (median_filter(probs, median_window) >= threshold).astype(np.uint8)


def activity_to_segmentation(activity, speakers, frame_rate: float) -> list[Segment]:
    segs = []
    for row, spk in zip(np.asarray(activity), speakers):
        segs += [Segment(str(spk), a / frame_rate, (b - a) / frame_rate) for a, b in runs_of(row)]
    return segs


def _frame_span(seg: Segment, frame_rate: float) -> tuple[int, int]:
    return int(round(seg.onset * frame_rate)), int(round((seg.onset + seg.duration) * frame_rate))


def rasterize(segments, frame_rate: float, n_frames: int | None = None):
    """Speaker labels (first-seen order) and their (S, T) binary activity."""
    labels: list[str] = []
    for seg in segments:
        if seg.duration <= 0:
            raise InputError(f"segment {seg} has non-positive duration")
        if seg.speaker not in labels:
            labels.append(seg.speaker)
    spans = [_frame_span(s, frame_rate) for s in segments]
    T = max([b for _, b in spans], default=0) if n_frames is None else n_frames
    act = np.zeros((len(labels), T), dtype=np.uint8)
    for seg, (a, b) in zip(segments, spans):
        act[labels.index(seg.speaker), max(a, 0):min(b, T)] = 1
    return labels, act


def der_counts(ref_act, hyp_act, mapping, scored=None) -> tuple[int, int, int, int]:
    """(miss, false alarm, confusion, reference speech) frame counts for a given mapping.

    ``mapping`` is a list of (ref_index, hyp_index) pairs.
    """
    T = ref_act.shape[1]
    scored = np.ones(T, dtype=bool) if scored is None else scored
    n_ref = ref_act[:, scored].sum(axis=0).astype(np.int64)
    n_hyp = hyp_act[:, scored].sum(axis=0).astype(np.int64)
    n_correct = np.zeros_like(n_ref)
    for i, j in mapping:
        n_correct += (ref_act[i, scored] & hyp_act[j, scored]).astype(np.int64)
    miss = int(np.maximum(n_ref - n_hyp, 0).sum())
    fa = int(np.maximum(n_hyp - n_ref, 0).sum())
    conf = int((np.minimum(n_ref, n_hyp) - n_correct).sum())
    return miss, fa, conf, int(n_ref.sum())


def collar_mask(ref_segments, frame_rate: float, n_frames: int, collar_s: float) -> np.ndarray:
    scored = np.ones(n_frames, dtype=bool)
    if collar_s <= 0:
        return scored
    times = np.arange(n_frames) / frame_rate
    for seg in ref_segments:
        for b in (seg.onset, seg.onset + seg.duration):
            scored &= np.abs(times - b) >= collar_s
    return scored


def der(ref, hyp, frame_rate: float, collar_s: float = 0.0, details: bool = False):
    """Frame-based DER under the speaker mapping that maximises matched frames."""
    _, ref_a = rasterize(ref, frame_rate)
    _, hyp_a = rasterize(hyp, frame_rate)
    T = max(ref_a.shape[1], hyp_a.shape[1])
    ref_a = np.pad(ref_a, ((0, 0), (0, T - ref_a.shape[1])))
    hyp_a = np.pad(hyp_a, ((0, 0), (0, T - hyp_a.shape[1])))
    scored = collar_mask(ref, frame_rate, T, collar_s)
    if ref_a[:, scored].sum() == 0:
        raise UndefinedMetricError("reference has no scored speech")
    mapping = []
    if len(hyp_a):
        overlap = ref_a[:, scored].astype(np.int64) @ hyp_a[:, scored].T.astype(np.int64)
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        mapping = list(zip(rows.tolist(), cols.tolist()))
    miss, fa, conf, total = der_counts(ref_a, hyp_a, mapping, scored)
    value = (miss + fa + conf) / total
    if details:
        return value, {"miss": miss, "false_alarm": fa, "confusion": conf, "total": total,
                       "mapping": mapping}
    return value
