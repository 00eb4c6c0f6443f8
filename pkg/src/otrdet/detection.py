"""Turn per-frame class probabilities into ``(class, time, score)`` detections."""

from __future__ import annotations

import numpy as np

from .records import CLASSES, FOREGROUND, Detection, FrameProbs, frame_to_time


def local_maxima(scores: np.ndarray, radius: int) -> np.ndarray:
    """Mask of frames that are maxima within +-radius; on ties the earlier frame wins."""
    T = scores.shape[0]
    keep = np.ones(T, dtype=bool)
    for off in range(1, radius + 1):
        if off >= T:
            break
        # earlier neighbour must be strictly lower, later neighbour lower or equal
        keep[off:] &= scores[off:] > scores[:-off]
        keep[:-off] &= scores[:-off] >= scores[off:]
    return keep


def extract_detections(fp: FrameProbs, theta: float = 0.0, nms_radius: int | None = None) -> list[Detection]:
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must be in [0, 1]")
    probs = np.asarray(fp.probs)
    T = probs.shape[0]
    per_class = []
    for c, name in enumerate(CLASSES):
        if name not in FOREGROUND:
            continue
        score = probs[:, c]
        mask = score >= theta
        if nms_radius is not None and nms_radius > 0:
            mask &= local_maxima(score, nms_radius)
        per_class.append((c, name, mask))
    dets = []
    for t in range(T):
        for c, name, mask in per_class:
            if mask[t]:
                s = min(max(float(probs[t, c]), 0.0), 1.0)
                dets.append(Detection(fp.video_id, name, frame_to_time(t, fp.fps), s))
    return dets
