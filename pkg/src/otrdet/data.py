"""Feature/annotation/detection files, the synthetic benchmark, and clip chunking.

Feature file (little-endian)::

    offset 0   4s   magic b"OTRF"
    offset 4   u32  version (1)
    offset 8   u32  T (frames)
    offset 12  u32  D (feature dim)
    offset 16  f32  fps
    offset 20  f32[T*D] row-major features

Annotations CSV: ``video_id,class,end_time_s``; detections CSV:
``video_id,class,time_s,score``.  Floats are written with ``repr`` so a
write/read round trip is exact.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .losses import FrameTargets
from .records import FOREGROUND, Detection, FeatureSequence, GroundTruthAction, frame_to_time

MAGIC = b"OTRF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIf")
FEATURE_SUFFIX = ".otrf"


class FormatError(ValueError):
    def __init__(self, message: str, path=None, offset: int | None = None, line: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.path, self.offset, self.line = path, offset, line


# --------------------------------------------------------------------------
# binary features


def write_features(path, fs: FeatureSequence) -> None:
    T, D = fs.features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, T, D, fs.fps))
        fh.write(fs.features.astype("<f4", copy=False).tobytes())


def read_features(path, video_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("bad magic, expected b'OTRF'", path, offset=0)
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header ({len(raw)} of {_HEADER.size} bytes)", path, offset=len(raw))
    _, version, T, D, fps = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", path, offset=4)
    if T < 1:
        raise FormatError("frame count must be >= 1", path, offset=8)
    if D < 1:
        raise FormatError("feature dim must be >= 1", path, offset=12)
    if not math.isfinite(fps) or fps <= 0:
        raise FormatError(f"fps must be finite and positive, got {fps}", path, offset=16)
    need = _HEADER.size + 4 * T * D
    if len(raw) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, file has {len(raw)}", path, offset=len(raw))
    if len(raw) > need:
        raise FormatError(f"{len(raw) - need} trailing bytes", path, offset=need)
    data = np.frombuffer(raw, dtype="<f4", count=T * D, offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise FormatError("non-finite feature value", path, offset=_HEADER.size + 4 * int(bad[0]))
    return FeatureSequence(video_id or path.stem, data.astype(np.float32).reshape(T, D), float(fps))


# --------------------------------------------------------------------------
# CSV files


def write_annotations(path, gts: list[GroundTruthAction]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "class", "end_time_s"])
        for g in gts:
            w.writerow([g.video_id, g.cls, repr(float(g.end_time))])


def read_annotations(path) -> list[GroundTruthAction]:
    rows = _read_csv(path, ["video_id", "class", "end_time_s"])
    out = []
    for line, row in rows:
        t = _parse_float(row[2], path, line)
        try:
            out.append(GroundTruthAction(row[0], row[1], t))
        except ValueError as exc:
            raise FormatError(str(exc), path, line=line) from None
    return out


def write_detections(path, dets: list[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "class", "time_s", "score"])
        for d in dets:
            w.writerow([d.video_id, d.cls, repr(float(d.time)), repr(float(d.score))])


def read_detections(path) -> list[Detection]:
    rows = _read_csv(path, ["video_id", "class", "time_s", "score"])
    out = []
    for line, row in rows:
        t = _parse_float(row[2], path, line)
        s = _parse_float(row[3], path, line)
        try:
            out.append(Detection(row[0], row[1], t, s))
        except ValueError as exc:
            raise FormatError(str(exc), path, line=line) from None
    return out


def _read_csv(path, header: list[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first != header:
            raise FormatError(f"expected header {','.join(header)}", path, line=1)
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"expected {len(header)} fields, got {len(row)}", path, line=reader.line_num)
            rows.append((reader.line_num, row))
    return rows


def _parse_float(text: str, path, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise FormatError(f"not a number: {text!r}", path, line=line) from None
    if not math.isfinite(value):
        raise FormatError(f"non-finite value {text!r}", path, line=line)
    return value


# --------------------------------------------------------------------------
# dataset directories


def save_split(directory, seqs: list[FeatureSequence], gts: list[GroundTruthAction]) -> None:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    for fs in seqs:
        write_features(directory / "features" / f"{fs.video_id}{FEATURE_SUFFIX}", fs)
    write_annotations(directory / "annotations.csv", gts)


def load_split(directory) -> tuple[list[FeatureSequence], list[GroundTruthAction]]:
    directory = Path(directory)
    feature_dir = directory / "features"
    if not feature_dir.is_dir():
        raise FileNotFoundError(f"{feature_dir} does not exist")
    seqs = [read_features(p) for p in sorted(feature_dir.glob(f"*{FEATURE_SUFFIX}"))]
    if not seqs:
        raise FileNotFoundError(f"no {FEATURE_SUFFIX} files in {feature_dir}")
    return seqs, read_annotations(directory / "annotations.csv")


# --------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthSpec:
    """Parameters of the synthetic action-end benchmark.

    Each action adds, on the feature dims owned by its class, a ramp rising
    linearly to ``amplitude`` at the action's last frame and falling back to
    zero afterwards.  Distractor events are ramps on a random class's dims
    that stop short of full amplitude.  Gaussian noise of std ``noise`` is
    added everywhere.
    """

    num_videos: int = 10
    num_frames: int = 2400
    feature_dim: int = 32
    fps: float = 4.0
    action_rate: float = 6.0          # actions per minute
    mean_duration: float = 8.0        # frames
    amplitude: float = 1.0
    noise: float = 0.5
    distractor_rate: float = 0.0      # aborted ramps per minute
    distractor_peak: float = 0.6      # fraction of amplitude reached by distractors
    dims_per_class: int = 8
    seed: int = 0
    video_prefix: str = "vid"

    def validate(self) -> None:
        if self.num_videos < 1 or self.num_frames < 1:
            raise ValueError("need at least one video and one frame")
        if self.action_rate <= 0 or self.mean_duration < 1 or self.fps <= 0:
            raise ValueError("action_rate and fps must be > 0 and mean_duration >= 1")
        if self.noise < 0 or self.distractor_rate < 0:
            raise ValueError("noise and distractor_rate must be >= 0")
        if 2 * self.dims_per_class > self.feature_dim or self.dims_per_class < 1:
            raise ValueError("feature_dim too small for two classes of dims_per_class dims")
        if self.num_frames < math.ceil(self.mean_duration):
            raise ValueError("videos are shorter than one action: no capacity for actions")

    def to_dict(self) -> dict:
        return asdict(self)


def _events(rng: np.random.Generator, T: int, rate_per_min: float, fps: float, mean_dur: float):
    """Non-overlapping (start, end) frame intervals from a renewal process."""
    cycle = 60.0 * fps / rate_per_min
    mean_gap = max(cycle - mean_dur, 1.0)
    out = []
    cursor = 0
    while True:
        dur = 1 + int(rng.poisson(mean_dur - 1))
        start = cursor + int(round(rng.exponential(mean_gap)))
        end = start + dur - 1
        if end >= T:
            break
        out.append((start, end))
        cursor = end + 1
    return out


def generate_synthetic(spec: SynthSpec) -> tuple[list[FeatureSequence], list[GroundTruthAction]]:
    spec.validate()
    root = np.random.default_rng(spec.seed)
    seqs, gts = [], []
    k = spec.dims_per_class
    for v in range(spec.num_videos):
        rng = np.random.default_rng(root.integers(2**63))
        vid = f"{spec.video_prefix}{v:04d}"
        T = spec.num_frames
        signal = np.zeros((T, spec.feature_dim))
        occupied = np.zeros(T, dtype=bool)
        for start, end in _events(rng, T, spec.action_rate, spec.fps, spec.mean_duration):
            c = int(rng.integers(2))
            d = end - start + 1
            ramp = spec.amplitude * np.arange(1, d + 1) / d
            signal[start:end + 1, c * k:(c + 1) * k] += ramp[:, None]
            occupied[start:end + 1] = True
            gts.append(GroundTruthAction(vid, FOREGROUND[c], frame_to_time(end, spec.fps)))
        if spec.distractor_rate > 0:
            for start, end in _events(rng, T, spec.distractor_rate, spec.fps, spec.mean_duration):
                if occupied[max(start - 1, 0):end + 2].any():
                    continue
                c = int(rng.integers(2))
                d = end - start + 1
                ramp = spec.distractor_peak * spec.amplitude * np.arange(1, d + 1) / d
                signal[start:end + 1, c * k:(c + 1) * k] += ramp[:, None]
        feats = signal + spec.noise * rng.standard_normal((T, spec.feature_dim))
        seqs.append(FeatureSequence(vid, feats.astype(np.float32), spec.fps))
    gts.sort(key=lambda g: (g.video_id, g.end_time))
    return seqs, gts


def generate_benchmark(seed: int = 0, num_train: int = 40, num_val: int = 10, num_test: int = 10,
                       **spec_kwargs) -> dict[str, tuple[list[FeatureSequence], list[GroundTruthAction]]]:
    """Train/val/test splits from independent child seeds of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(3)
    splits = {}
    for (name, n), child in zip((("train", num_train), ("val", num_val), ("test", num_test)), children):
        if n <= 0:
            continue
        spec = SynthSpec(num_videos=n, seed=int(child.generate_state(1)[0]), video_prefix=f"{name}_",
                         **spec_kwargs)
        splits[name] = generate_synthetic(spec)
    return splits


# --------------------------------------------------------------------------
# clips


@dataclass
class Clip:
    video_id: str
    start: int
    features: np.ndarray
    targets: FrameTargets


@dataclass
class ClipBatch:
    clips: np.ndarray                  # [B, T_clip, D]
    targets: list[FrameTargets]
    provenance: list[tuple[str, int]]

    @classmethod
    def from_clips(cls, clips: list[Clip]) -> "ClipBatch":
        lengths = {c.features.shape[0] for c in clips}
        if len(lengths) > 1:
            raise ValueError(f"clips in a batch must share a length, got {sorted(lengths)}")
        return cls(np.stack([c.features for c in clips]), [c.targets for c in clips],
                   [(c.video_id, c.start) for c in clips])


def chunk_video(fs: FeatureSequence, gts: list[GroundTruthAction], clip_len: int = 20,
                stride: int | None = None) -> list[Clip]:
    """Fixed-length clips starting every ``stride`` frames; a trailing partial clip is dropped."""
    stride = clip_len if stride is None else stride
    if clip_len < 1 or not 1 <= stride <= clip_len:
        raise ValueError("need 1 <= stride <= clip_len")
    T = fs.num_frames
    own = [g for g in gts if g.video_id == fs.video_id]
    clips = []
    if T < clip_len:
        return clips
    for start in range(0, T - clip_len + 1, stride):
        targets = FrameTargets.from_actions(own, clip_len, fs.fps, start_frame=start)
        clips.append(Clip(fs.video_id, start, fs.features[start:start + clip_len], targets))
    return clips
