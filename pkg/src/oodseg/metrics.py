"""Pixel- and segment-level OOD segmentation metrics.

Pixel level: area under the precision-recall curve (average precision,
rectangle rule) and the false-positive rate at the threshold reaching a
target true-positive rate (default 95%). Thresholds run descending
through the distinct score values; tied scores form one block. Both
metrics are exact rank statistics computed from a single sort of the
scores; there is no histogram approximation, and the scan is chunked so
memory stays bounded even at 10^8 pixels.

Segment level: ground-truth segments are 8-connected components of the
OOD label, predicted segments are components of (score >= threshold)
with ignored pixels removed. For a GT segment k, with K(k) the union of
predicted segments touching k:

    sIoU(k) = |k intersect K(k)| / (|k union K(k)| - |adj(k)|)

where adj(k) are the pixels of K(k) outside k that belong to *other* GT
segments, so predictions claimed by another true object do not penalize
k. For a predicted segment q, PPV(q) = |q intersect GT| / |q|. At each
matching threshold tau in {0.25, 0.30, ..., 0.75}:

    TP(tau) = #{k : sIoU(k) > tau}      FN(tau) = #GT - TP(tau)
    FP(tau) = #{q : PPV(q) <= tau}      F1(tau) = 2TP / (2TP + FN + FP)

Reported values: mean sIoU over GT segments and mean PPV over predicted
segments (both threshold-independent), and the mean of F1(tau) over the
eleven thresholds. Dataset evaluation pools pixels and segments across
all images before averaging, in input order, so results do not depend on
how work is parallelized.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DimensionMismatch,
    MalformedReport,
    NoEvaluablePixels,
    NoGtSegments,
    NoNegatives,
    NoPositives,
)
from .raster_io import (
    LABEL_IGNORE,
    LABEL_OOD,
    validate_label_mask,
    validate_raster,
)

DEFAULT_TAUS: tuple[float, ...] = tuple(round(0.25 + 0.05 * i, 2) for i in range(11))
DEFAULT_TARGET_TPR = 0.95
DEFAULT_CONNECTIVITY = 8

_SCAN_CHUNK = 1 << 22


# --- scored pixels ------------------------------------------------------------


@dataclass
class ScoredPixels:
    """Parallel score/label vectors with ignore pixels already removed."""

    scores: np.ndarray  # float32
    labels: np.ndarray  # bool, True = OOD

    def __post_init__(self) -> None:
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise DimensionMismatch(
                f"scores {self.scores.shape} vs labels {self.labels.shape}"
            )
        if self.scores.size and (
            not np.isfinite(self.scores).all()
            or self.scores.min() < 0.0
            or self.scores.max() > 1.0
        ):
            from .errors import ValueOutOfRange

            raise ValueOutOfRange("scores must be finite and within [0, 1]")

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return int(self.labels.size - self.labels.sum())


def collect_scored_pixels(score: np.ndarray, gt: np.ndarray) -> ScoredPixels:
    """Flatten a score map against its mask, dropping IGNORE pixels.

    Kept pixels stay in row-major order.
    """
    score = validate_raster(score)
    gt = validate_label_mask(gt)
    if score.shape != gt.shape:
        raise DimensionMismatch(f"score {score.shape} vs ground truth {gt.shape}")
    keep = gt != LABEL_IGNORE
    if not keep.any():
        raise NoEvaluablePixels("every pixel is ignored")
    return ScoredPixels(score[keep], gt[keep] == LABEL_OOD)


# --- exact threshold-block scan -------------------------------------------------


def _pack_sorted(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Sortable uint64 encoding: score order in the high bits, label in bit 0.

    Scores are validated non-negative floats, so their IEEE bit patterns
    with a flipped sign bit sort like the values. Adding +0.0 first maps
    any -0.0 onto +0.0 so equal scores land in the same block.
    """
    s = np.ascontiguousarray(scores, dtype=np.float32) + np.float32(0.0)
    key = s.view(np.uint32) ^ np.uint32(0x80000000)
    packed = key.astype(np.uint64) << np.uint64(1)
    packed |= labels.astype(np.uint64)
    packed.sort()
    return packed


def _desc_block_counts(
    packed: np.ndarray, chunk_size: int = _SCAN_CHUNK
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (tp, fp) cumulative counts at each distinct-score block end,
    scanning from the highest score downward in bounded memory."""
    n = packed.shape[0]
    if n == 0:
        return
    rev = packed[::-1]
    done_tp = 0
    done_fp = 0
    carry_tp = 0
    carry_fp = 0
    carry_key: int | None = None
    for start in range(0, n, chunk_size):
        chunk = np.ascontiguousarray(rev[start : start + chunk_size])
        m = chunk.shape[0]
        lab_cum = np.cumsum((chunk & np.uint64(1)).astype(np.int64))
        keys = chunk >> np.uint64(1)

        prepend: tuple[int, int] | None = None
        if carry_key is not None and int(keys[0]) != carry_key:
            # the carried block closed exactly at the chunk boundary
            prepend = (done_tp + carry_tp, done_fp + carry_fp)
            done_tp += carry_tp
            done_fp += carry_fp
            carry_tp = 0
            carry_fp = 0

        ends = np.flatnonzero(keys[:-1] != keys[1:])
        tp_ends = done_tp + carry_tp + lab_cum[ends]
        fp_ends = done_fp + carry_fp + (ends + 1) - lab_cum[ends]
        if prepend is not None:
            tp_ends = np.concatenate(([prepend[0]], tp_ends))
            fp_ends = np.concatenate(([prepend[1]], fp_ends))

        if ends.size:
            last = int(ends[-1])
            closed_tp = int(lab_cum[last])
            done_tp += carry_tp + closed_tp
            done_fp += carry_fp + (last + 1 - closed_tp)
            carry_tp = int(lab_cum[-1]) - closed_tp
            carry_fp = (m - last - 1) - carry_tp
        else:
            carry_tp += int(lab_cum[-1])
            carry_fp += m - int(lab_cum[-1])
        carry_key = int(keys[-1])

        if tp_ends.size:
            yield tp_ends, fp_ends
    yield np.array([done_tp + carry_tp]), np.array([done_fp + carry_fp])


def _ap_from_packed(packed: np.ndarray, n_pos: int, chunk_size: int = _SCAN_CHUNK) -> float:
    numerator = 0.0
    prev_tp = 0
    for tp, fp in _desc_block_counts(packed, chunk_size):
        dtp = np.diff(tp, prepend=prev_tp)
        precision = tp / (tp + fp)
        numerator += float((dtp * precision).sum())
        prev_tp = int(tp[-1])
    return numerator / n_pos


def _fpr_from_packed(
    packed: np.ndarray, n_pos: int, n_neg: int, target: float, chunk_size: int = _SCAN_CHUNK
) -> float:
    for tp, fp in _desc_block_counts(packed, chunk_size):
        hits = np.flatnonzero(tp / n_pos >= target)
        if hits.size:
            return float(fp[hits[0]] / n_neg)
    return 1.0


@dataclass
class PRCurve:
    """Precision/recall at every distinct score value, thresholds descending.

    The last point (lowest threshold) declares everything positive, so
    recall ends at 1; walking thresholds upward, recall never increases.
    Every listed point has TP + FP > 0 by construction.
    """

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def __post_init__(self) -> None:
        if not (self.thresholds.shape == self.precision.shape == self.recall.shape):
            raise DimensionMismatch("curve arrays must be parallel")


def pr_curve(sp: ScoredPixels) -> PRCurve:
    """Materialized precision-recall curve (for inspection and plots).

    auprc/fpr_at_tpr do not go through this: they use a chunked scan that
    never holds the whole curve in memory.
    """
    n_pos = sp.n_positive
    if n_pos == 0:
        raise NoPositives("no OOD pixel in the scored set")
    order = np.argsort(-sp.scores.astype(np.float64), kind="stable")
    scores = sp.scores[order]
    labels = sp.labels[order]
    ends = np.append(np.flatnonzero(np.diff(scores) != 0), scores.size - 1)
    tp = np.cumsum(labels)[ends]
    fp = (ends + 1) - tp
    return PRCurve(
        thresholds=scores[ends].copy(),
        precision=tp / (tp + fp),
        recall=tp / n_pos,
    )


def auprc(sp: ScoredPixels) -> float:
    """Average precision over descending distinct-score thresholds."""
    n_pos = sp.n_positive
    if n_pos == 0:
        raise NoPositives("no OOD pixel in the scored set")
    packed = _pack_sorted(sp.scores, sp.labels)
    return _ap_from_packed(packed, n_pos)


def fpr_at_tpr(sp: ScoredPixels, target_tpr: float = DEFAULT_TARGET_TPR) -> float:
    """FPR at the largest threshold whose TPR reaches the target."""
    n_pos = sp.n_positive
    n_neg = sp.n_negative
    if n_pos == 0:
        raise NoPositives("no OOD pixel in the scored set")
    if n_neg == 0:
        raise NoNegatives("no in-distribution pixel in the scored set")
    packed = _pack_sorted(sp.scores, sp.labels)
    return _fpr_from_packed(packed, n_pos, n_neg, target_tpr)


# --- connected components --------------------------------------------------------

_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
    8: np.ones((3, 3), dtype=bool),
}


@dataclass(frozen=True)
class Segment:
    """One connected region: sorted row-major flat pixel indices into (H, W)."""

    index: int
    flat_pixels: np.ndarray
    shape: tuple[int, int]

    @property
    def area(self) -> int:
        return int(self.flat_pixels.size)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(x, y, w, h) of the tight bounding rectangle."""
        rows, cols = np.divmod(self.flat_pixels, self.shape[1])
        x0, x1 = int(cols.min()), int(cols.max())
        y0, y1 = int(rows.min()), int(rows.max())
        return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)

    def pixel_coords(self) -> tuple[np.ndarray, np.ndarray]:
        return np.divmod(self.flat_pixels, self.shape[1])


def _label_components(mask: np.ndarray, connectivity: int) -> tuple[np.ndarray, int]:
    """Label components 1..n, numbered by first pixel in row-major order."""
    if connectivity not in _STRUCTURES:
        raise DimensionMismatch(f"connectivity must be 4 or 8, got {connectivity}")
    labeled, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if n == 0:
        return labeled.astype(np.int32), 0
    flat = labeled.ravel()
    values, first_idx = np.unique(flat, return_index=True)
    nonzero = values > 0
    order = np.argsort(first_idx[nonzero], kind="stable")
    lut = np.zeros(n + 1, dtype=np.int32)
    lut[values[nonzero][order]] = np.arange(1, n + 1, dtype=np.int32)
    return lut[labeled], n


def connected_components(mask: np.ndarray, connectivity: int = DEFAULT_CONNECTIVITY) -> list[Segment]:
    """Maximal connected regions of a binary mask, in deterministic order."""
    mask = np.ascontiguousarray(mask).astype(bool)
    if mask.ndim != 2:
        raise DimensionMismatch(f"mask must be 2-D, got shape {mask.shape}")
    labeled, n = _label_components(mask, connectivity)
    if n == 0:
        return []
    flat = labeled.ravel()
    idx = np.flatnonzero(flat)
    order = idx[np.argsort(flat[idx], kind="stable")]
    labels_sorted = flat[order]
    boundaries = np.flatnonzero(np.diff(labels_sorted)) + 1
    groups = np.split(order, boundaries)
    return [Segment(i, g, mask.shape) for i, g in enumerate(groups)]


# --- segment-level metrics --------------------------------------------------------


@dataclass
class PerTauRow:
    tau: float
    tp: int
    fn: int
    fp: int
    f1: float


@dataclass
class SegmentTallies:
    """Per-segment quality values, poolable across images."""

    siou: np.ndarray  # float64, one per GT segment
    ppv: np.ndarray  # float64, one per predicted segment


def _segment_tallies(
    score: np.ndarray, gt: np.ndarray, binarize_at: float, connectivity: int
) -> SegmentTallies:
    score = validate_raster(score)
    gt = validate_label_mask(gt)
    if score.shape != gt.shape:
        raise DimensionMismatch(f"score {score.shape} vs ground truth {gt.shape}")

    gt_ood = gt == LABEL_OOD
    pred_mask = (score >= binarize_at) & (gt != LABEL_IGNORE)

    gt_lab, n_gt = _label_components(gt_ood, connectivity)
    pred_lab, n_pred = _label_components(pred_mask, connectivity)

    if n_pred == 0:
        ppv = np.zeros(0, dtype=np.float64)
        ovl_total = np.zeros(1, dtype=np.int64)
    else:
        pred_area = np.bincount(pred_lab.ravel(), minlength=n_pred + 1)[1:]
        on_gt = pred_lab[gt_ood]
        ovl_total = np.bincount(on_gt, minlength=n_pred + 1)
        ppv = ovl_total[1:] / pred_area

    if n_gt == 0:
        return SegmentTallies(np.zeros(0, dtype=np.float64), ppv)

    gt_area = np.bincount(gt_lab.ravel(), minlength=n_gt + 1)[1:]
    both = (gt_lab > 0) & (pred_lab > 0)
    if not both.any():
        return SegmentTallies(np.zeros(n_gt, dtype=np.float64), ppv)

    g = gt_lab[both].astype(np.int64)
    p = pred_lab[both].astype(np.int64)
    codes, counts = np.unique(g * np.int64(n_pred + 1) + p, return_counts=True)
    pair_gt = codes // (n_pred + 1)
    pair_pred = codes % (n_pred + 1)

    pred_area = np.bincount(pred_lab.ravel(), minlength=n_pred + 1)[1:]
    inter = np.zeros(n_gt + 1, dtype=np.int64)
    claimed_area = np.zeros(n_gt + 1, dtype=np.int64)  # total area of K(k)
    adj = np.zeros(n_gt + 1, dtype=np.int64)
    np.add.at(inter, pair_gt, counts)
    np.add.at(claimed_area, pair_gt, pred_area[pair_pred - 1])
    np.add.at(adj, pair_gt, ovl_total[pair_pred] - counts)

    union = gt_area + claimed_area[1:] - inter[1:]
    siou = inter[1:] / (union - adj[1:])
    return SegmentTallies(siou, ppv)


def _per_tau_rows(
    siou: np.ndarray, ppv: np.ndarray, taus: Sequence[float]
) -> list[PerTauRow]:
    n_gt = siou.size
    rows = []
    for tau in taus:
        tp = int((siou > tau).sum())
        fn = n_gt - tp
        fp = int((ppv <= tau).sum())
        f1 = 2 * tp / (2 * tp + fn + fp)
        rows.append(PerTauRow(float(tau), tp, fn, fp, f1))
    return rows


@dataclass
class SegmentMetricsResult:
    mean_siou: float  # percent
    mean_ppv: float  # percent
    mean_f1: float  # percent
    per_threshold: list[PerTauRow]
    n_gt_segments: int
    n_pred_segments: int
    no_predicted_segments: bool


def _summarize_tallies(
    tallies: SegmentTallies, taus: Sequence[float]
) -> SegmentMetricsResult:
    if tallies.siou.size == 0:
        raise NoGtSegments("ground truth contains no OOD segment")
    rows = _per_tau_rows(tallies.siou, tallies.ppv, taus)
    no_pred = tallies.ppv.size == 0
    mean_ppv = 0.0 if no_pred else float(tallies.ppv.mean())
    return SegmentMetricsResult(
        mean_siou=float(tallies.siou.mean()) * 100.0,
        mean_ppv=mean_ppv * 100.0,
        mean_f1=float(np.mean([r.f1 for r in rows])) * 100.0,
        per_threshold=rows,
        n_gt_segments=int(tallies.siou.size),
        n_pred_segments=int(tallies.ppv.size),
        no_predicted_segments=no_pred,
    )


def segment_metrics(
    score: np.ndarray,
    gt: np.ndarray,
    binarize_at: float,
    taus: Sequence[float] = DEFAULT_TAUS,
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> SegmentMetricsResult:
    """Segment-level evaluation of one score map against its mask."""
    if not 0.0 <= binarize_at <= 1.0:
        raise DimensionMismatch(f"binarize_at must be in [0, 1], got {binarize_at}")
    tallies = _segment_tallies(score, gt, binarize_at, connectivity)
    return _summarize_tallies(tallies, taus)


# --- dataset evaluation -------------------------------------------------------------


@dataclass
class EvalReport:
    """Everything the evaluation protocol reports for one configuration.

    auprc/fpr95 are fractions in [0, 1]; the three segment means are
    percentages in [0, 100].
    """

    auprc: float
    fpr95: float
    mean_siou: float
    mean_ppv: float
    mean_f1: float
    per_threshold: list[PerTauRow]
    n_images: int
    n_pixels_evaluated: int
    n_pixels_ood: int
    n_pixels_in_dist: int
    n_pixels_ignored: int
    n_gt_segments: int
    n_pred_segments: int
    no_predicted_segments: bool
    binarize_at: float
    connectivity: int
    target_tpr: float = DEFAULT_TARGET_TPR
    generated_at: str = ""

    def to_json(self) -> str:
        payload = asdict(self)
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedReport(f"not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise MalformedReport("report JSON must be an object")
        try:
            rows = [PerTauRow(**row) for row in payload.pop("per_threshold")]
            return cls(per_threshold=rows, **payload)
        except (KeyError, TypeError) as exc:
            raise MalformedReport(f"report is missing fields: {exc}") from exc

    def per_threshold_csv(self) -> str:
        lines = ["tau,tp,fn,fp,f1"]
        for r in self.per_threshold:
            lines.append(f"{r.tau},{r.tp},{r.fn},{r.fp},{r.f1!r}")
        return "\n".join(lines) + "\n"


@dataclass
class _ImageSummary:
    scores: np.ndarray
    labels: np.ndarray
    n_ignored: int
    tallies: SegmentTallies


def _summarize_image(
    score: np.ndarray, gt: np.ndarray, binarize_at: float, connectivity: int
) -> _ImageSummary:
    score = validate_raster(score)
    gt = validate_label_mask(gt)
    if score.shape != gt.shape:
        raise DimensionMismatch(f"score {score.shape} vs ground truth {gt.shape}")
    keep = gt != LABEL_IGNORE
    return _ImageSummary(
        scores=score[keep],
        labels=gt[keep] == LABEL_OOD,
        n_ignored=int(keep.size - keep.sum()),
        tallies=_segment_tallies(score, gt, binarize_at, connectivity),
    )


def evaluate_dataset(
    pairs: Iterable[tuple[np.ndarray, np.ndarray]],
    binarize_at: float = 0.5,
    connectivity: int = DEFAULT_CONNECTIVITY,
    taus: Sequence[float] = DEFAULT_TAUS,
    threads: int = 1,
    target_tpr: float = DEFAULT_TARGET_TPR,
    timestamp: bool = True,
) -> EvalReport:
    """Pool pixels and segments over (score, mask) pairs and report all metrics.

    Per-image summaries may be computed on a thread pool; they are merged
    in input order, so the report is identical for any thread count.
    """
    if not 0.0 <= binarize_at <= 1.0:
        raise DimensionMismatch(f"binarize_at must be in [0, 1], got {binarize_at}")
    pair_list = list(pairs)
    if not pair_list:
        raise NoEvaluablePixels("no image pairs to evaluate")

    def work(pair: tuple[np.ndarray, np.ndarray]) -> _ImageSummary:
        return _summarize_image(pair[0], pair[1], binarize_at, connectivity)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            summaries = list(pool.map(work, pair_list))
    else:
        summaries = [work(p) for p in pair_list]

    scores = np.concatenate([s.scores for s in summaries])
    labels = np.concatenate([s.labels for s in summaries])
    if scores.size == 0:
        raise NoEvaluablePixels("every pixel of every image is ignored")
    sp = ScoredPixels(scores, labels)
    n_pos, n_neg = sp.n_positive, sp.n_negative
    if n_pos == 0:
        raise NoPositives("no OOD pixel in the dataset")
    if n_neg == 0:
        raise NoNegatives("no in-distribution pixel in the dataset")
    packed = _pack_sorted(sp.scores, sp.labels)
    ap = _ap_from_packed(packed, n_pos)
    fpr = _fpr_from_packed(packed, n_pos, n_neg, target_tpr)
    del packed

    pooled = SegmentTallies(
        siou=np.concatenate([s.tallies.siou for s in summaries]),
        ppv=np.concatenate([s.tallies.ppv for s in summaries]),
    )
    seg = _summarize_tallies(pooled, taus)

    return EvalReport(
        auprc=ap,
        fpr95=fpr,
        mean_siou=seg.mean_siou,
        mean_ppv=seg.mean_ppv,
        mean_f1=seg.mean_f1,
        per_threshold=seg.per_threshold,
        n_images=len(summaries),
        n_pixels_evaluated=int(scores.size),
        n_pixels_ood=n_pos,
        n_pixels_in_dist=n_neg,
        n_pixels_ignored=sum(s.n_ignored for s in summaries),
        n_gt_segments=seg.n_gt_segments,
        n_pred_segments=seg.n_pred_segments,
        no_predicted_segments=seg.no_predicted_segments,
        binarize_at=binarize_at,
        connectivity=connectivity,
        target_tpr=target_tpr,
        generated_at=datetime.now(timezone.utc).isoformat() if timestamp else "",
    )
