"""Plain record types shared across modules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CLASSES = ("take", "release", "background")
FOREGROUND = ("take", "release")
BACKGROUND = 2
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}


@dataclass(frozen=True)
class GroundTruthAction:
    video_id: str
    cls: str
    end_time: float

    def __post_init__(self):
        if self.cls not in FOREGROUND:
            raise ValueError(f"ground-truth class must be one of {FOREGROUND}, got {self.cls!r}")
        if not math.isfinite(self.end_time) or self.end_time < 0:
            raise ValueError(f"end_time must be finite and >= 0, got {self.end_time}")


@dataclass(frozen=True)
class Detection:
    video_id: str
    cls: str
    time: float
    score: float

    def __post_init__(self):
        if self.cls not in FOREGROUND:
            raise ValueError(f"detection class must be one of {FOREGROUND}, got {self.cls!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray
    fps: float = 4.0

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be [T>=1, D], got {self.features.shape}")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class FrameProbs:
    video_id: str
    fps: float
    probs: np.ndarray

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")


def frame_to_time(frame: int, fps: float) -> float:
    if fps <= 0:
        raise ValueError("fps must be positive")
    return frame / fps


def time_to_frame(t: float, fps: float) -> int:
    """Nearest frame index; exact half-way points go to the earlier frame."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    return int(math.ceil(t * fps - 0.5))
