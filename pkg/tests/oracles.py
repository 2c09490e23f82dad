"""Independent brute-force reference implementations used only by tests.

Everything here is written the slow, obvious way - explicit threshold
scans, BFS flood fill, Python set arithmetic - and deliberately shares no
code with the library, so agreement between the two is meaningful.
"""

from __future__ import annotations

from collections import deque

import numpy as np


def ap_bruteforce(scores, labels) -> float:
    """Average precision, recomputing precision/recall at every distinct
    threshold independently (O(n * thresholds))."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    assert n_pos > 0
    thresholds = sorted(set(scores.tolist()), reverse=True)
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        pred = scores >= t
        tp = int((pred & labels).sum())
        fp = int((pred & ~labels).sum())
        precision = tp / (tp + fp)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def fpr_at_tpr_bruteforce(scores, labels, target: float = 0.95) -> float:
    """FPR at the largest threshold reaching the target TPR, by full scan."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    assert n_pos > 0 and n_neg > 0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int((pred & labels).sum())
        if tp / n_pos >= target:
            fp = int((pred & ~labels).sum())
            return fp / n_neg
    return 1.0


def flood_fill_components(mask, connectivity: int = 8) -> list[frozenset]:
    """Connected regions as pixel-coordinate sets via BFS flood fill."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if connectivity == 4:
        moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        moves = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    seen = np.zeros_like(mask)
    components = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            queue = deque([(r, c)])
            seen[r, c] = True
            pixels = set()
            while queue:
                pr, pc = queue.popleft()
                pixels.add((pr, pc))
                for dr, dc in moves:
                    nr, nc = pr + dr, pc + dc
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            components.append(frozenset(pixels))
    return components


def segment_metrics_bruteforce(
    score,
    gt,
    binarize_at: float,
    taus,
    connectivity: int = 8,
) -> dict:
    """Segment-level metrics with every set size computed explicitly."""
    score = np.asarray(score, dtype=np.float64)
    gt = np.asarray(gt)
    ignore = gt == 255
    gt_ood = gt == 1
    pred_mask = (score >= binarize_at) & ~ignore

    gt_segments = flood_fill_components(gt_ood, connectivity)
    pred_segments = flood_fill_components(pred_mask, connectivity)
    all_gt_pixels = frozenset().union(*gt_segments) if gt_segments else frozenset()

    siou = []
    for k in gt_segments:
        claimed = frozenset().union(
            *[q for q in pred_segments if q & k]
        ) if any(q & k for q in pred_segments) else frozenset()
        inter = len(k & claimed)
        union = len(k | claimed)
        # predicted pixels outside k that belong to some other true segment
        adj = len((claimed - k) & (all_gt_pixels - k))
        siou.append(inter / (union - adj))

    ppv = [len(q & all_gt_pixels) / len(q) for q in pred_segments]

    rows = []
    for tau in taus:
        tp = sum(1 for v in siou if v > tau)
        fn = len(siou) - tp
        fp = sum(1 for v in ppv if v <= tau)
        rows.append((tau, tp, fn, fp, 2 * tp / (2 * tp + fn + fp)))

    return {
        "siou": siou,
        "ppv": ppv,
        "rows": rows,
        "mean_siou": 100.0 * (sum(siou) / len(siou)),
        "mean_ppv": 100.0 * (sum(ppv) / len(ppv)) if ppv else 0.0,
        "mean_f1": 100.0 * sum(r[4] for r in rows) / len(rows),
    }


def argmax_bruteforce(volume) -> np.ndarray:
    """Linear-scan argmax with lowest-index tie break."""
    volume = np.asarray(volume)
    h, w, c = volume.shape
    out = np.zeros((h, w), dtype=np.int32)
    for r in range(h):
        for col in range(w):
            best = 0
            for ch in range(1, c):
                if volume[r, col, ch] > volume[r, col, best]:
                    best = ch
            out[r, col] = best
    return out
