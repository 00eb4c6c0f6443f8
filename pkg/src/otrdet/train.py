"""Clip-based training loop, Adam, and the binary checkpoint format.

Checkpoint layout (little-endian)::

    4s  magic b"OTRC"
    u32 version (1)
    u32 number of tensor records
    per record: u32 name length, utf-8 name, u32 ndim, u32 dims[ndim], f32 data
    u32 length, utf-8 JSON document (model config, train config, epoch,
        optimizer step, rng state, history, best score)
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .data import ClipBatch, chunk_video, FormatError
from .detection import extract_detections
from .inference import infer_streaming_many
from .losses import FrameTargets, LossConfig, total_loss
from .metrics import mp_map
from .model import ModelConfig, ModelParams, forward, init_model
from .numkernel import NumericError, Tensor
from .records import FeatureSequence, GroundTruthAction

log = logging.getLogger(__name__)

CKPT_MAGIC = b"OTRC"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    clip_len: int = 20
    stride: int | None = None
    grad_clip: float | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    val_theta: float = 0.0
    val_nms_radius: int | None = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("need lr > 0, epochs >= 1, batch_size >= 1")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "betas": list(self.betas), "eps": self.eps, "seed": self.seed,
            "clip_len": self.clip_len, "stride": self.stride, "grad_clip": self.grad_clip,
            "model": self.model.to_dict(), "loss": self.loss.to_dict(),
            "val_theta": self.val_theta, "val_nms_radius": self.val_nms_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        d["loss"] = LossConfig(**d.get("loss", {}))
        return cls(**d)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns new parameter arrays and moments."""
    b1, b2 = betas
    t = state.step + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params, m_out, v_out = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise nk.DimensionError(f"{k}: gradient {g.shape} vs parameter {p.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        new_params[k] = (p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
        m_out[k] = m.astype(p.dtype)
        v_out[k] = v.astype(p.dtype)
    return new_params, AdamState(m_out, v_out, t)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    rng_state: dict
    epoch: int = 0
    meta: dict = field(default_factory=dict)
    best_params: dict[str, np.ndarray] | None = None

    def model(self, best: bool = True) -> ModelParams:
        arrays = self.best_params if (best and self.best_params is not None) else self.params
        return ModelParams(self.model_config,
                           {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()})


def fresh_checkpoint(config: TrainConfig) -> Checkpoint:
    params = init_model(config.model, config.seed)
    arrays = {k: v.copy() for k, v in params.arrays().items()}
    rng = np.random.default_rng(config.seed)
    return Checkpoint(config.model, arrays, AdamState.zeros_like(arrays), rng.bit_generator.state, 0,
                      {"train_config": config.to_dict(), "history": [], "best_score": None,
                       "best_epoch": None})


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    records = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    records += [(f"adam_m/{k}", v) for k, v in ckpt.adam.m.items()]
    records += [(f"adam_v/{k}", v) for k, v in ckpt.adam.v.items()]
    if ckpt.best_params is not None:
        records += [(f"best/{k}", v) for k, v in ckpt.best_params.items()]
    doc = {
        "model_config": ckpt.model_config.to_dict(),
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam.step,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(records)))
        for name, arr in records:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        blob = json.dumps(doc, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(blob)) + blob)


def load_checkpoint(path, model_config: ModelConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("truncated checkpoint", path, offset=pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError("bad magic, expected b'OTRC'", path, offset=0)
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, offset=4)
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}, "best": {}}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise FormatError(f"unknown record {name!r}", path, offset=pos)
        groups[kind][key] = arr
    (n,) = struct.unpack("<I", take(4))
    doc = json.loads(take(n).decode())
    cfg = ModelConfig(**doc["model_config"])
    if model_config is not None and cfg != model_config:
        raise ValueError(f"checkpoint model config {cfg} does not match {model_config}")
    adam = AdamState(groups["adam_m"], groups["adam_v"], doc["adam_step"])
    return Checkpoint(cfg, groups["param"], adam, doc["rng_state"], doc["epoch"], doc["meta"],
                      groups["best"] or None)


# --------------------------------------------------------------------------
# training loop


def make_clips(data, config: TrainConfig):
    seqs, gts = data
    clips = []
    for fs in seqs:
        clips.extend(chunk_video(fs, gts, config.clip_len, config.stride))
    if not clips:
        raise TrainingError("no training clips: videos shorter than clip_len?")
    return clips


def evaluate(params: ModelParams, seqs: list[FeatureSequence], gts: list[GroundTruthAction],
             theta: float = 0.0, nms_radius: int | None = None):
    """Streaming inference, detection extraction and mp-mAP in one call."""
    dets = []
    for fp in infer_streaming_many(params, seqs):
        dets.extend(extract_detections(fp, theta, nms_radius))
    return mp_map(dets, gts), dets


def _first_nonfinite(named: dict[str, np.ndarray]) -> str | None:
    for k, v in named.items():
        if not np.isfinite(v).all():
            return k
    return None


def _culprit(params: ModelParams, batch: ClipBatch) -> str:
    bad = _first_nonfinite(params.arrays())
    if bad is not None:
        return f"parameter {bad}"
    for clip, (vid, start) in zip(batch.clips, batch.provenance):
        if not np.isfinite(clip).all():
            return f"input clip {vid}@{start}"
    return "none found (overflow inside the graph)"


def train_epoch(params: ModelParams, clips, config: TrainConfig, adam: AdamState,
                rng: np.random.Generator) -> tuple[float, AdamState]:
    order = rng.permutation(len(clips))
    losses = []
    for b0 in range(0, len(order), config.batch_size):
        batch = ClipBatch.from_clips([clips[i] for i in order[b0:b0 + config.batch_size]])
        for t in params.tensors.values():
            t.grad = None
            t.requires_grad = True
        try:
            with nk.Tape() as tape:
                logits, _ = forward(params, batch.clips)
                probs = nk.softmax(logits)
                loss = total_loss(probs, batch.targets, config.loss)
            tape.backward(loss)
        except NumericError as exc:
            raise TrainingError(f"non-finite value during step {adam.step + 1}: {exc}; "
                                f"first non-finite tensor: {_culprit(params, batch)}") from exc
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in params.tensors.items()}
        bad = _first_nonfinite(grads)
        if bad is not None:
            raise TrainingError(f"non-finite gradient for {bad} at step {adam.step + 1}")
        if config.grad_clip is not None:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > config.grad_clip:
                grads = {k: g * np.float32(config.grad_clip / norm) for k, g in grads.items()}
        new, adam = adam_step(params.arrays(), grads, adam, config.lr, config.betas, config.eps)
        for k, t in params.tensors.items():
            t.data = new[k]
            t.grad = None
        losses.append(loss.item())
    return float(np.mean(losses)), adam


def train(train_data, val_data, config: TrainConfig, checkpoint_path=None,
          resume: Checkpoint | None = None, stop_after: int | None = None):
    """Train on clips of ``config.clip_len`` frames; select the best epoch by
    validation mp-mAP under streaming inference.

    Returns ``(best params, history)``.  With ``checkpoint_path`` the state is
    written after every epoch; ``resume`` continues from such a checkpoint.
    ``stop_after`` ends the run early after that many total epochs.
    """
    ckpt = resume if resume is not None else fresh_checkpoint(config)
    if ckpt.model_config != config.model:
        raise ValueError("checkpoint model config does not match the training config")
    params = ckpt.model(best=False)
    adam = ckpt.adam
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    history = list(ckpt.meta.get("history", []))
    best_score = ckpt.meta.get("best_score")
    best_epoch = ckpt.meta.get("best_epoch")
    best_params = ckpt.best_params
    clips = make_clips(train_data, config)
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(ckpt.epoch + 1, last + 1):
        loss, adam = train_epoch(params, clips, config, adam, rng)
        entry = {"epoch": epoch, "train_loss": loss}
        if val_data is not None:
            report, _ = evaluate(params, val_data[0], val_data[1], config.val_theta, config.val_nms_radius)
            entry["val_mp_map"] = report.mp_map
            score = report.mp_map
        else:
            score = -loss
        if best_score is None or score > best_score:
            best_score, best_epoch = score, epoch
            best_params = {k: v.copy() for k, v in params.arrays().items()}
        history.append(entry)
        log.info("epoch %d loss %.5f %s", epoch, loss,
                 f"val mp-mAP {entry['val_mp_map']:.2f}" if "val_mp_map" in entry else "")
        ckpt = Checkpoint(config.model, {k: v.copy() for k, v in params.arrays().items()}, adam,
                          rng.bit_generator.state, epoch,
                          {"train_config": config.to_dict(), "history": history,
                           "best_score": best_score, "best_epoch": best_epoch},
                          best_params)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, ckpt)
    best = ckpt.model(best=True)
    return best, history


# --------------------------------------------------------------------------
# gradient audit


def gradient_audit(config: ModelConfig, seed: int = 0, frames: int = 8, max_entries: int | None = 256,
                   h: float = 1e-5, tol: float = 1e-2, loss: LossConfig | None = None,
                   dtype=np.float64) -> nk.GradCheckReport:
    """Finite-difference check of every parameter tensor of a freshly built model.

    The graph is the training objective on a random ``frames``-long clip with
    one take and one release end frame.  Float64 is the default: float32
    differences cannot resolve the small gradients of the step-size and
    decay parameters.
    """
    params = init_model(config, seed)
    for t in params.tensors.values():
        t.data = t.data.astype(dtype)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((frames, config.feature_dim)).astype(dtype)
    labels = np.full(frames, 2)
    ends = sorted(rng.choice(frames, size=min(2, frames), replace=False).tolist())
    for c, f in enumerate(ends):
        labels[f] = c
    targets = FrameTargets(labels, ends)
    loss = loss or LossConfig(lam=0.5)

    def objective():
        return total_loss(nk.softmax(forward(params, x)[0]), targets, loss)

    return nk.grad_check(objective, params.tensors, h=h, tol=tol, max_entries=max_entries, rng=rng)
