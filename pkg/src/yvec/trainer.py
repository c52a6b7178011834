"""Speaker-classification training loop and checkpointing.

One epoch samples utterances with replacement, crops a fixed-length window
from each, and runs SGD with momentum on the additive-margin softmax loss
plus an L2 penalty on the two post-pooling layers. The learning rate halves
on a fixed epoch schedule. All randomness for an epoch derives from
(seed, epoch), so a run is reproducible from its configuration alone and a
resumed run continues the identical stream.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import aggregator, audio
from . import numerics as nm
from .model import SpeakerNet

CHECKPOINT_MAGIC = b"YVEC"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TrainingDivergedError(RuntimeError):
    """The loss became NaN/Inf; message names the epoch and batch index."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is not readable under the current format."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.5
    decay_every_epochs: int = 60
    epochs: int = 300
    batch_size: int = 96
    crop_seconds: float = 3.9
    utterances_per_epoch: int = 240000
    l2_lambda: float = 1e-4
    am_scale: float = 30.0
    am_margin: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if min(self.lr0, self.decay_factor, self.crop_seconds) <= 0:
            raise ValueError("lr0, decay_factor and crop_seconds must be positive")
        if min(self.decay_every_epochs, self.epochs, self.batch_size,
               self.utterances_per_epoch) < 1:
            raise ValueError("epoch, batch and sample counts must be positive")
        # batch_size may exceed utterances_per_epoch: the single partial
        # batch is trained on rather than dropped
        if self.l2_lambda < 0 or self.momentum < 0:
            raise ValueError("l2_lambda and momentum must be nonnegative")

    @property
    def crop_samples(self) -> int:
        return int(round(self.crop_seconds * audio.SAMPLE_RATE))

    @property
    def am_config(self) -> aggregator.AmSoftmaxConfig:
        return aggregator.AmSoftmaxConfig(scale=self.am_scale, margin=self.am_margin)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every_epochs)


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    accuracy: float
    n_batches: int
    n_examples: int


def init_velocities(model: SpeakerNet) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p.data) for name, p in model.named_parameters()}


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train_epoch(model: SpeakerNet, corpus: audio.LoadedCorpus, cfg: TrainConfig,
                epoch: int, velocities: dict[str, np.ndarray],
                log_fn: Optional[Callable[[dict], None]] = None) -> EpochMetrics:
    """One pass of ``utterances_per_epoch`` sampled-with-replacement crops.

    The final partial batch is trained on. Deterministic for a given
    (cfg.seed, epoch) pair.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    rng = _epoch_rng(cfg.seed, epoch)
    order = rng.integers(0, len(corpus), size=cfg.utterances_per_epoch)
    lr = lr_at_epoch(cfg, epoch)
    crop = cfg.crop_samples
    names = [name for name, _ in model.named_parameters()]
    params = model.parameters()
    vels = [velocities[name] for name in names]

    losses, correct, seen = [], 0, 0
    for step, start in enumerate(range(0, len(order), cfg.batch_size)):
        chosen = order[start:start + cfg.batch_size]
        waves = np.stack([audio.random_crop(corpus.utterances[i], crop, rng)
                          for i in chosen])
        labels = corpus.labels[chosen]
        model.zero_grads()
        _, features = model.forward_batch(waves, training=True, rng=rng)
        loss = nm.add(
            aggregator.am_softmax_loss(features, labels, model.class_weights, cfg.am_config),
            aggregator.fc_l2_penalty(model.agg_params, cfg.l2_lambda))
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}, batch {step}")
        nm.backward(loss)
        nm.sgd_momentum_step(params, vels, lr=lr, momentum=cfg.momentum)
        cos = aggregator.cosine_logits(features.data, model.class_weights.data)
        batch_correct = int((cos.argmax(axis=1) == labels).sum())
        correct += batch_correct
        seen += len(chosen)
        losses.append(loss_value)
        if log_fn is not None:
            log_fn({"epoch": epoch, "step": step, "lr": lr,
                    "loss": loss_value, "acc": batch_correct / len(chosen)})
    return EpochMetrics(epoch=epoch, mean_loss=float(np.mean(losses)),
                        accuracy=correct / seen, n_batches=len(losses), n_examples=seen)


def train_run(model: SpeakerNet, corpus: audio.LoadedCorpus, cfg: TrainConfig,
              *, start_epoch: int = 0,
              velocities: Optional[dict[str, np.ndarray]] = None,
              ckpt_path=None, save_every: int = 0,
              config_snapshot: str = "",
              log_fn: Optional[Callable[[dict], None]] = None) -> list[EpochMetrics]:
    """Run epochs [start_epoch, cfg.epochs); checkpoint on the save interval
    and always after the final epoch."""
    if velocities is None:
        velocities = init_velocities(model)
    metrics = []
    for epoch in range(start_epoch, cfg.epochs):
        metrics.append(train_epoch(model, corpus, cfg, epoch, velocities, log_fn))
        is_last = epoch == cfg.epochs - 1
        if ckpt_path is not None and (is_last or (save_every and (epoch + 1) % save_every == 0)):
            checkpoint_save(ckpt_path, model, velocities, epoch + 1,
                            config_snapshot=config_snapshot, seed=cfg.seed)
    return metrics


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, JSON header, named little-endian blobs


@dataclass
class Checkpoint:
    version: int
    epoch: int
    seed: int
    rng_state: dict
    config_snapshot: str
    model_config: dict
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def build_model(self, dtype=np.float32) -> SpeakerNet:
        net = SpeakerNet.from_config_dict(self.model_config, seed=0, dtype=dtype)
        net.load_parameter_data(self.params)
        return net


def _write_blob(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    code = _DTYPE_CODES[np.dtype(arr.dtype.name)]
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())


def _read_blob(buf: memoryview, offset: int) -> tuple[str, np.ndarray, int]:
    try:
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = bytes(buf[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        code, ndim = struct.unpack_from("<BB", buf, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(buf):
            raise struct.error("blob data extends past end of file")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"truncated or corrupt checkpoint blob: {exc}") from exc
    return name, arr, offset


def checkpoint_save(path, model: SpeakerNet, velocities: dict[str, np.ndarray],
                    epoch: int, config_snapshot: str = "", seed: int = 0) -> None:
    """Write magic, version, JSON header, then named parameter/velocity blobs."""
    header = {
        "epoch": epoch,
        "seed": seed,
        # epoch streams derive from (seed, epoch): this is the full RNG state
        "rng_state": {"scheme": "per-epoch-derived", "seed": seed, "next_epoch": epoch},
        "config_snapshot": config_snapshot,
        "model": model.config_dict(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    names = sorted(name for name, _ in model.named_parameters())
    params = dict(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", 2 * len(names)))
        for name in names:
            _write_blob(fh, f"param/{name}", params[name].data)
        for name in names:
            _write_blob(fh, f"velocity/{name}", velocities[name])


def checkpoint_load(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<I", raw, 8)
    if 12 + header_len > len(raw):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header: {exc}") from exc
    buf = memoryview(raw)
    offset = 12 + header_len
    try:
        (n_blobs,) = struct.unpack_from("<I", raw, offset)
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated blob count") from exc
    offset += 4
    params: dict[str, np.ndarray] = {}
    velocities: dict[str, np.ndarray] = {}
    for _ in range(n_blobs):
        name, arr, offset = _read_blob(buf, offset)
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        elif name.startswith("velocity/"):
            velocities[name[len("velocity/"):]] = arr
        else:
            raise CheckpointFormatError(f"{path}: unknown blob kind {name!r}")
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(version=version, epoch=int(header["epoch"]),
                      seed=int(header["seed"]), rng_state=header["rng_state"],
                      config_snapshot=header["config_snapshot"],
                      model_config=header["model"], params=params, velocities=velocities)
