"""Mini-batch SGD with momentum over whole utterances, plus checkpoint I/O.

Each utterance is one BPTT unit. Batch gradients are summed in ascending
batch-position order, clipped by global L2 norm, and applied with momentum.
Given the same seed, data and settings, training is reproducible down to the
checkpoint bytes.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .cell import CellDims
from .network import (
    FeedbackConfig,
    JointGrads,
    JointModel,
    backward_sequence,
    forward_sequence,
    init_joint_model,
    joint_loss,
)
from .numerics import SplitMix64, derive_seed

CHECKPOINT_MAGIC = b"MTRL"
CHECKPOINT_VERSION = 1

# fixed fan-out streams under one user-facing seed
STREAM_INIT = 1
STREAM_SHUFFLE = 2


class TrainingDivergedError(RuntimeError):
    """Raised when a non-finite loss shows up mid-training."""


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be parsed or validated."""


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 5.0
    epochs: int = 15
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainState:
    model: JointModel
    velocity: JointGrads
    optim: OptimConfig
    epoch: int = 0
    # one (train_loss, heldout_frame_error, heldout_speaker_accuracy) per epoch
    history: list = field(default_factory=list)


def init_rng(seed):
    """The model-init stream for a user seed (shared by train and ablate)."""
    return SplitMix64(derive_seed(seed, STREAM_INIT))


def clip_global_norm(grads, clip_norm):
    """Scale all gradients in place so their joint L2 norm is <= clip_norm."""
    if clip_norm <= 0:
        raise ValueError(f"clip_norm must be > 0, got {clip_norm}")
    total = 0.0
    for _, arr in grads.iter_arrays():
        total += float((arr * arr).sum())
    norm = math.sqrt(total)
    if norm > clip_norm:
        grads.scale_(clip_norm / norm)
    return grads


def sgd_step(state, grads, config):
    """velocity <- momentum * velocity + grads; params <- params - lr * velocity."""
    params = list(state.model.iter_arrays())
    vel = list(state.velocity.iter_arrays())
    gs = list(grads.iter_arrays())
    if len(params) != len(gs):
        raise ValueError("gradient structure does not match the model")
    for (name, p), (_, v), (gname, g) in zip(params, vel, gs):
        if p.shape != g.shape or name != gname:
            raise ValueError(f"gradient {gname} has {g.shape}, parameter {name} has {p.shape}")
        v *= config.momentum
        v += g
        p -= config.learning_rate * v
    return state


def train(model, train_set, heldout_set, config):
    """Train a copy of `model`; the passed-in model is left untouched.

    Per epoch: shuffle utterance order (seeded), sum each batch's sequence
    gradients in order, clip, step; then record train loss and held-out frame
    error / speaker-id accuracy. Returns the final TrainState.
    """
    from .evaluation import frame_error_rate, speaker_id_accuracy

    if not train_set or not heldout_set:
        raise ValueError("train and heldout sets must be non-empty")
    state = TrainState(model=model.copy(), velocity=JointGrads.zeros_like(model), optim=config)
    rng = SplitMix64(derive_seed(config.seed, STREAM_SHUFFLE))
    order = list(range(len(train_set)))
    for epoch in range(config.epochs):
        rng.shuffle(order)
        loss_total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            grads = JointGrads.zeros_like(state.model)
            for idx in batch:
                utt = train_set[idx]
                asr_logits, sre_logits, cache = forward_sequence(state.model, utt.frames)
                loss, d_asr, d_sre = joint_loss(
                    asr_logits, sre_logits, utt.phone_labels, utt.speaker, state.model.delay
                )
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, "
                        f"batch {start // config.batch_size}, utterance {utt.id}"
                    )
                loss_total += loss
                grads.add_(backward_sequence(state.model, cache, d_asr, d_sre))
            clip_global_norm(grads, config.clip_norm)
            sgd_step(state, grads, config)
        state.history.append(
            (
                loss_total / len(order),
                frame_error_rate(state.model, heldout_set),
                speaker_id_accuracy(state.model, heldout_set),
            )
        )
        state.epoch = epoch + 1
    return state


def _dims_to_list(dims):
    return [dims.in_dim, dims.cell_dim, dims.rproj_dim, dims.pproj_dim, dims.out_dim]


def save_checkpoint(state, path):
    """Write a TrainState: magic, version, JSON header, then raw float64 data.

    Layout: b"MTRL" | u32 version (LE) | u64 header length (LE) | UTF-8 JSON
    header | parameters | velocities. Both float blocks are little-endian
    float64 in the model's canonical array order (asr tower flat, sre tower
    flat, cross matrices in grid order).
    """
    model = state.model
    header = {
        "dims_asr": _dims_to_list(model.asr.dims),
        "dims_sre": _dims_to_list(model.sre.dims),
        "feedback": {
            "sources": list(model.config.sources),
            "sinks": list(model.config.sinks),
        },
        "delay": model.delay,
        "epoch": state.epoch,
        "optim": asdict(state.optim),
        "history": [list(row) for row in state.history],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", len(hbytes))
    blob += hbytes
    for _, arr in model.iter_arrays():
        blob += arr.astype("<f8", copy=False).tobytes()
    for _, arr in state.velocity.iter_arrays():
        blob += arr.astype("<f8", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint back into a TrainState, validating as it goes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16:
        raise CheckpointError(f"{path}: file too short to hold a checkpoint header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    if 16 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated inside the header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
        dims_asr = CellDims(*header["dims_asr"])
        dims_sre = CellDims(*header["dims_sre"])
        config = FeedbackConfig(
            sources=tuple(header["feedback"]["sources"]),
            sinks=tuple(header["feedback"]["sinks"]),
        )
        delay = int(header["delay"])
        epoch = int(header["epoch"])
        optim = OptimConfig(**header["optim"])
        history = [tuple(row) for row in header["history"]]
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: invalid header: {exc}") from exc

    model = init_joint_model(dims_asr, dims_sre, config, delay, SplitMix64(0))
    for _, arr in model.iter_arrays():
        arr[...] = 0.0
    velocity = JointGrads.zeros_like(model)
    count = model.param_count()
    payload = len(data) - 16 - hlen
    if payload != 2 * count * 8:
        raise CheckpointError(
            f"{path}: payload holds {payload} bytes, model needs {2 * count * 8}"
        )
    values = np.frombuffer(data, dtype="<f8", offset=16 + hlen)
    pos = 0
    for container in (model, velocity):
        for _, arr in container.iter_arrays():
            arr.reshape(-1)[:] = values[pos : pos + arr.size]
            pos += arr.size
    return TrainState(model=model, velocity=velocity, optim=optim, epoch=epoch, history=history)
