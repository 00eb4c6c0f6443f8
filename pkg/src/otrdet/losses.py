"""Training objective: focal loss plus a weighted temporal regulariser.

Window regularisers act on the per-frame foreground probability
``1 - p(background)``.  Both window sums are linear in that probability, so
they are evaluated as a dot product with per-frame window-coverage counts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .numkernel import ContractError, Tensor
from .records import BACKGROUND, CLASS_INDEX, GroundTruthAction, time_to_frame

LOG_FLOOR = 1e-12


class RegKind(str, enum.Enum):
    NONE = "none"
    ENTROPY = "entropy"
    SLIDING_WINDOW = "sliding_window"
    FIXED_WINDOW = "fixed_window"


@dataclass
class LossConfig:
    gamma: float = 2.0
    alpha: tuple[float, ...] = (1.0, 1.0, 0.25)
    lam: float = 0.01
    reg_kind: RegKind = RegKind.FIXED_WINDOW
    window_w: int = 4

    def __post_init__(self):
        self.reg_kind = RegKind(self.reg_kind)
        self.alpha = tuple(float(a) for a in self.alpha)
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if len(self.alpha) != 3 or min(self.alpha) <= 0:
            raise ValueError("alpha needs three positive entries")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.window_w < 1:
            raise ValueError("window_w must be >= 1")

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "alpha": list(self.alpha), "lam": self.lam,
                "reg_kind": self.reg_kind.value, "window_w": self.window_w}


@dataclass
class FrameTargets:
    """Per-frame labels (end frame of each action positive, the rest background)."""

    labels: np.ndarray
    gt_frames: list[int] = field(default_factory=list)

    @classmethod
    def from_actions(cls, actions: list[GroundTruthAction], num_frames: int, fps: float,
                     start_frame: int = 0) -> "FrameTargets":
        labels = np.full(num_frames, BACKGROUND, dtype=np.int64)
        frames = []
        for a in actions:
            f = time_to_frame(a.end_time, fps) - start_frame
            if 0 <= f < num_frames:
                labels[f] = CLASS_INDEX[a.cls]
                frames.append(f)
        return cls(labels, sorted(frames))


def focal_loss(probs: Tensor, labels: np.ndarray, gamma: float = 2.0,
               alpha=(1.0, 1.0, 0.25)) -> Tensor:
    """Mean over frames of ``-alpha[y] * (1 - p_y)**gamma * log(p_y)``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    labels = np.asarray(labels, dtype=np.int64)
    p_true = nk.gather_last(probs, labels)
    logp = nk.log(nk.clamp_min(p_true, LOG_FLOOR))
    weight = np.asarray(alpha, dtype=probs.data.dtype)[labels]
    if gamma == 0:
        per_frame = nk.mul(logp, Tensor(-weight, dtype=probs.data.dtype))
    else:
        modulator = nk.power(nk.sub(1.0, p_true), gamma)
        per_frame = nk.mul(nk.mul(modulator, logp), Tensor(-weight, dtype=probs.data.dtype))
    return nk.mean(per_frame)


def entropy_reg(probs: Tensor) -> Tensor:
    """``-sum_t sum_c p log p`` (floored log), summed over all frames."""
    logp = nk.log(nk.clamp_min(probs, LOG_FLOOR))
    return nk.neg(nk.total(nk.mul(probs, logp)))


def foreground_prob(probs: Tensor) -> Tensor:
    """``1 - p(background)`` per frame, shape ``probs.shape[:-1]``."""
    bg = nk.reshape(nk.slice_last(probs, BACKGROUND, BACKGROUND + 1), probs.shape[:-1])
    return nk.sub(1.0, bg)


def sliding_coverage(num_frames: int, w: int) -> np.ndarray:
    """How many windows ``[f - w//2, f + w//2]`` (f over all frames) contain each frame."""
    half = w // 2
    i = np.arange(num_frames)
    return (np.minimum(i + half, num_frames - 1) - np.maximum(i - half, 0) + 1).astype(np.float64)


def fixed_coverage(num_frames: int, gt_frames, w: int) -> np.ndarray:
    half = w // 2
    cover = np.zeros(num_frames)
    for g in gt_frames:
        if not 0 <= g < num_frames:
            raise ContractError(f"ground-truth frame {g} outside [0, {num_frames})")
        cover[max(g - half, 0): min(g + half, num_frames - 1) + 1] += 1
    return cover


def sliding_window_reg(p_fg: Tensor, w: int) -> Tensor:
    """Sum over every frame f of the probabilities inside its window (truncated at the ends)."""
    T = p_fg.shape[-1]
    return nk.dot(p_fg, np.broadcast_to(sliding_coverage(T, w), p_fg.shape))


def fixed_window_reg(p_fg: Tensor, gt_frames, w: int) -> Tensor:
    """Sum of the probabilities in windows centred on each ground-truth frame.

    For a batch ``p_fg[B, T]``, ``gt_frames`` is a list of per-clip frame lists.
    """
    if p_fg.data.ndim == 1:
        cover = fixed_coverage(p_fg.shape[0], gt_frames, w)
    else:
        cover = np.stack([fixed_coverage(p_fg.shape[-1], g, w) for g in gt_frames])
    return nk.dot(p_fg, cover)


def regularizer(probs: Tensor, gt_frames, config: LossConfig) -> Tensor | None:
    kind = config.reg_kind
    if kind is RegKind.NONE:
        return None
    if kind is RegKind.ENTROPY:
        return entropy_reg(probs)
    p_fg = foreground_prob(probs)
    if kind is RegKind.SLIDING_WINDOW:
        return sliding_window_reg(p_fg, config.window_w)
    return fixed_window_reg(p_fg, gt_frames, config.window_w)


def total_loss(probs: Tensor, targets, config: LossConfig) -> Tensor:
    """Focal loss plus ``lam * R``.

    ``targets`` is a :class:`FrameTargets` for a single clip ``probs[T, C]``
    or a list of them for a batch ``probs[B, T, C]``; the regulariser is then
    averaged over clips.
    """
    if isinstance(targets, FrameTargets):
        labels, gt = targets.labels, targets.gt_frames
        n_clips = 1
    else:
        labels = np.stack([t.labels for t in targets])
        gt = [t.gt_frames for t in targets]
        n_clips = len(targets)
    loss = focal_loss(probs, labels, config.gamma, config.alpha)
    if config.lam == 0:
        return loss
    reg = regularizer(probs, gt, config)
    if reg is None:
        return loss
    return nk.add(loss, nk.mul(reg, config.lam / n_clips))
