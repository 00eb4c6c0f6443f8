"""Test-time regimes: streaming (one frame at a time, state carried for the
whole video) and sliding windows (state reset per window), plus latency
measurement.

Both regimes drive :func:`~otrdet.model.forward_step`.  Sequences of equal
length (or equal-length windows) are stepped together as a batch, which does
not change any per-sequence arithmetic.
"""

from __future__ import annotations

import json
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numkernel as nk
from .model import ModelParams, forward_step, reset_state
from .numkernel import DimensionError, Tensor
from .records import FeatureSequence, FrameProbs


def _check_dim(params: ModelParams, fs: FeatureSequence) -> None:
    if fs.features.shape[1] != params.config.feature_dim:
        raise DimensionError(f"{fs.video_id}: feature dim {fs.features.shape[1]} "
                             f"but model expects {params.config.feature_dim}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    return nk.softmax(Tensor(logits, dtype=logits.dtype)).data


def run_steps(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Chain ``forward_step`` over ``x[B, T, D]`` from a fresh state; probs ``[B, T, C]``."""
    B, T, _ = x.shape
    state = reset_state(params.config, (B,))
    out = np.empty((B, T, params.config.num_classes), dtype=np.float32)
    for t in range(T):
        logits, state = forward_step(params, state, x[:, t])
        out[:, t] = _softmax(logits)
    return out


def infer_streaming(params: ModelParams, fs: FeatureSequence) -> FrameProbs:
    _check_dim(params, fs)
    probs = run_steps(params, fs.features[None])[0]
    return FrameProbs(fs.video_id, fs.fps, probs)


def infer_streaming_many(params: ModelParams, seqs: list[FeatureSequence]) -> list[FrameProbs]:
    """Streaming inference over several videos, batching videos of equal length."""
    groups = defaultdict(list)
    for i, fs in enumerate(seqs):
        _check_dim(params, fs)
        groups[fs.num_frames].append(i)
    out: list[FrameProbs | None] = [None] * len(seqs)
    for _, idx in sorted(groups.items()):
        probs = run_steps(params, np.stack([seqs[i].features for i in idx]))
        for k, i in enumerate(idx):
            out[i] = FrameProbs(seqs[i].video_id, seqs[i].fps, probs[k])
    return out


def sliding_windows(num_frames: int, window: int, stride: int) -> list[tuple[int, int]]:
    """Window ``[start, stop)`` spans; stops once a window reaches the last frame."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    spans = []
    start = 0
    while True:
        spans.append((start, min(start + window, num_frames)))
        if start + window >= num_frames:
            return spans
        start += stride


def owner_window(spans: list[tuple[int, int]], num_frames: int) -> np.ndarray:
    """Index of the window each frame is read from: the earliest one containing it."""
    owner = np.full(num_frames, -1, dtype=np.int64)
    for w, (a, b) in enumerate(spans):
        fresh = owner[a:b] < 0
        owner[a:b][fresh] = w
    return owner


def infer_sliding(params: ModelParams, fs: FeatureSequence, window: int, stride: int) -> FrameProbs:
    """Each window restarts from a fresh state; each frame takes its probability
    from the window in which it has the most preceding context."""
    _check_dim(params, fs)
    T = fs.num_frames
    spans = sliding_windows(T, window, stride)
    owner = owner_window(spans, T)
    by_len = defaultdict(list)
    for w, (a, b) in enumerate(spans):
        by_len[b - a].append(w)
    probs = np.empty((T, params.config.num_classes), dtype=np.float32)
    for length, ws in sorted(by_len.items()):
        batch = np.stack([fs.features[spans[w][0]:spans[w][1]] for w in ws])
        out = run_steps(params, batch)
        for k, w in enumerate(ws):
            a, b = spans[w]
            mine = owner[a:b] == w
            probs[a:b][mine] = out[k][mine]
    return FrameProbs(fs.video_id, fs.fps, probs)


def frame_steps(num_frames: int, window: int, stride: int) -> int:
    """Frames processed by sliding inference (re-processed frames counted again)."""
    return sum(b - a for a, b in sliding_windows(num_frames, window, stride))


# --------------------------------------------------------------------------
# latency


@dataclass
class LatencyReport:
    mode: str
    num_frames: int
    repeats: int
    video_time_s: float
    video_times_s: list[float]
    frame_mean_s: float
    frame_median_s: float
    frame_p99_s: float
    peak_state_bytes: int
    frame_steps: int
    step_times_s: list[float] = field(default_factory=list, repr=False)

    def to_dict(self, with_steps: bool = False) -> dict:
        d = asdict(self)
        if not with_steps:
            d.pop("step_times_s")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def step_time_near(self, frame: int, halfwidth: int = 50) -> float:
        """Median step time of the frames within ``halfwidth`` of ``frame``."""
        t = np.asarray(self.step_times_s)
        lo, hi = max(frame - halfwidth, 0), min(frame + halfwidth + 1, t.size)
        return float(np.median(t[lo:hi]))


def timed_pass(params: ModelParams, x: np.ndarray, spans) -> tuple[float, np.ndarray, int]:
    """Step through each ``[start, stop)`` span from a fresh state.

    Returns total wall time, per-step times and the largest state size seen.
    """
    steps = np.empty(sum(b - a for a, b in spans))
    peak = 0
    k = 0
    t_start = time.perf_counter()
    for a, b in spans:
        state = reset_state(params.config)
        for t in range(a, b):
            t0 = time.perf_counter()
            _, state = forward_step(params, state, x[t])
            steps[k] = time.perf_counter() - t0
            k += 1
        peak = max(peak, state.nbytes())
    return time.perf_counter() - t_start, steps, peak


def benchmark(params: ModelParams, fs: FeatureSequence, mode: str = "streaming", repeats: int = 3,
              window: int = 20, stride: int = 20) -> LatencyReport:
    """Time per-video and per-step processing, excluding feature extraction.

    One untimed warm-up pass precedes ``repeats`` timed passes.  The per-step
    timings kept are those of the median-duration pass.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    _check_dim(params, fs)
    T = fs.num_frames
    if mode == "streaming":
        spans = [(0, T)]
    elif mode == "sliding":
        spans = sliding_windows(T, window, stride)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    x = fs.features
    timed_pass(params, x[: min(T, 64)], [(0, min(T, 64))])
    runs = [timed_pass(params, x, spans) for _ in range(repeats)]
    totals = [r[0] for r in runs]
    median_run = runs[int(np.argsort(totals)[len(totals) // 2])]
    steps = median_run[1]
    per_frame = np.array(totals) / T
    return LatencyReport(
        mode=mode,
        num_frames=T,
        repeats=repeats,
        video_time_s=float(np.median(totals)),
        video_times_s=[float(v) for v in totals],
        frame_mean_s=float(per_frame.mean()),
        frame_median_s=float(np.median(steps)),
        frame_p99_s=float(np.percentile(steps, 99)),
        peak_state_bytes=int(max(r[2] for r in runs)),
        frame_steps=int(steps.size),
        step_times_s=[float(v) for v in steps],
    )
