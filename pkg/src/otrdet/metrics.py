"""Point-level mAP for action-end detection.

A detection matches a ground truth of the same class when their times are at
most ``phi`` seconds apart.  Detections are visited in descending score
order; each takes the nearest unmatched ground truth within reach (ties go to
the earlier ground truth) and otherwise counts as a false positive.
Matching happens per video, ranking for AP is pooled across videos.

Score ties are broken by earlier time, then by input order.  AP is the
non-interpolated mean of precision at each true positive.
"""

from __future__ import annotations

import bisect
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .records import FOREGROUND, Detection, GroundTruthAction

THRESHOLDS = tuple(float(s) for s in range(1, 11))


@dataclass
class MatchResult:
    tp: list[bool]                 # per detection, in input order
    matched_gt: list[int | None]   # index into the gts list for each TP
    num_fn: int

    @property
    def num_tp(self) -> int:
        return sum(self.tp)

    @property
    def num_fp(self) -> int:
        return len(self.tp) - self.num_tp


def rank_order(dets: list[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].time, i))


def match_greedy(dets: list[Detection], gts: list[GroundTruthAction], phi: float,
                 cls: str | None = None) -> MatchResult:
    """Greedy confidence-ordered matching, restricted to ``cls`` when given.

    Items of other classes are reported as non-matching detections / ignored
    ground truths.
    """
    gt_by_video: dict[str, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        if cls is None or g.cls == cls:
            gt_by_video[g.video_id].append(j)
    times: dict[str, list[float]] = {}
    for vid, idx in gt_by_video.items():
        idx.sort(key=lambda j: (gts[j].end_time, j))
        times[vid] = [gts[j].end_time for j in idx]
    taken: set[int] = set()
    tp = [False] * len(dets)
    matched: list[int | None] = [None] * len(dets)
    slack = 1e-9 * (1.0 + phi)
    for i in rank_order(dets):
        d = dets[i]
        if cls is not None and d.cls != cls:
            continue
        idx = gt_by_video.get(d.video_id)
        if not idx:
            continue
        tv = times[d.video_id]
        lo = bisect.bisect_left(tv, d.time - phi - slack)
        hi = bisect.bisect_right(tv, d.time + phi + slack)
        best, best_key = None, None
        for j in idx[lo:hi]:
            g = gts[j]
            if j in taken or g.cls != d.cls:
                continue
            offset = abs(d.time - g.end_time)
            if offset <= phi:
                key = (offset, g.end_time, j)
                if best_key is None or key < best_key:
                    best, best_key = j, key
        if best is not None:
            taken.add(best)
            tp[i] = True
            matched[i] = best
    n_gt = sum(len(v) for v in gt_by_video.values()) if cls is not None else len(gts)
    return MatchResult(tp, matched, n_gt - len(taken))


def average_precision(flags, num_gt: int) -> float | None:
    """Non-interpolated AP of a ranked TP/FP list; ``None`` when undefined."""
    flags = np.asarray(flags, dtype=bool)
    if num_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    hits = np.cumsum(flags)
    precision = hits / np.arange(1, flags.size + 1)
    return float(precision[flags].sum() / num_gt)


def class_ap(dets: list[Detection], gts: list[GroundTruthAction], phi: float, cls: str):
    """AP for one class plus its (tp, fp, fn) counts."""
    own = [d for d in dets if d.cls == cls]
    own_gts = [g for g in gts if g.cls == cls]
    res = match_greedy(own, own_gts, phi, cls)
    flags = [res.tp[i] for i in rank_order(own)]
    return average_precision(flags, len(own_gts)), (res.num_tp, res.num_fp, res.num_fn)


def p_map(dets: list[Detection], gts: list[GroundTruthAction], phi: float) -> float:
    """Mean AP over foreground classes at one threshold (fraction, not percent)."""
    aps = [class_ap(dets, gts, phi, c)[0] for c in FOREGROUND]
    aps = [a for a in aps if a is not None]
    return float(np.mean(aps)) if aps else 0.0


@dataclass
class EvalReport:
    thresholds: list[float]
    class_ap: dict[str, list[float | None]]
    p_map: list[float]
    mp_map: float
    counts: list[dict[str, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "thresholds_s": self.thresholds,
            "class_ap": self.class_ap,
            "p_map": self.p_map,
            "mp_map": self.mp_map,
            "counts": self.counts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'phi(s)':>7} " + " ".join(f"{c:>8}" for c in FOREGROUND) + f" {'p-mAP':>8}"]
        for k, phi in enumerate(self.thresholds):
            aps = ["     n/a" if self.class_ap[c][k] is None else f"{self.class_ap[c][k]:8.2f}"
                   for c in FOREGROUND]
            lines.append(f"{phi:7.1f} " + " ".join(aps) + f" {self.p_map[k]:8.2f}")
        lines.append(f"mp-mAP {self.mp_map:.2f}")
        return "\n".join(lines)


def mp_map(dets: list[Detection], gts: list[GroundTruthAction],
           thresholds=THRESHOLDS) -> EvalReport:
    """p-mAP at every threshold and their mean, all in percent."""
    per_class: dict[str, list[float | None]] = {c: [] for c in FOREGROUND}
    pmaps, counts = [], []
    for phi in thresholds:
        aps = []
        tp = fp = fn = 0
        for c in FOREGROUND:
            ap, (t, f, n) = class_ap(dets, gts, phi, c)
            per_class[c].append(None if ap is None else 100.0 * ap)
            if ap is not None:
                aps.append(ap)
            tp, fp, fn = tp + t, fp + f, fn + n
        pmaps.append(100.0 * float(np.mean(aps)) if aps else 0.0)
        counts.append({"tp": tp, "fp": fp, "fn": fn})
    return EvalReport(list(thresholds), per_class, pmaps, float(np.mean(pmaps)), counts)


def detections_per_gt(dets: list[Detection], gts: list[GroundTruthAction], radius: float = 1.0,
                      weighted: bool = False) -> float:
    """Mean number of same-class detections within ``radius`` seconds of a ground truth.

    With ``weighted`` each detection counts by its score (expected count).
    """
    if not gts:
        return 0.0
    index: dict[tuple[str, str], np.ndarray] = {}
    scores: dict[tuple[str, str], np.ndarray] = {}
    grouped = defaultdict(list)
    for d in dets:
        grouped[(d.video_id, d.cls)].append(d)
    for key, items in grouped.items():
        index[key] = np.array([d.time for d in items])
        scores[key] = np.array([d.score for d in items])
    total = 0.0
    for g in gts:
        key = (g.video_id, g.cls)
        if key not in index:
            continue
        near = np.abs(index[key] - g.end_time) <= radius
        total += float(scores[key][near].sum()) if weighted else int(near.sum())
    return total / len(gts)
