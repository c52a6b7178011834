"""Frame aggregation and the speaker-classification head.

A five-layer time-dilated network turns encoder frames into high-level
frame features; statistical pooling (per-channel mean and standard
deviation over time) collapses them to one utterance vector. Two fully
connected layers follow; the speaker embedding is the pre-activation
output of the first, while the second only serves the additive-margin
softmax classifier during training. Verification uses plain cosine
similarity between embeddings.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from .numerics import Tensor


class ScoringError(ValueError):
    """An embedding cannot be scored (zero norm, missing utterance)."""


@dataclass(frozen=True)
class TdnnConfig:
    """Dilated layer stack plus head dimensions.

    ``layers`` holds (width, kernel, dilation) triples; kernels are odd so
    every layer context is symmetric around the center frame.
    """
    layers: tuple[tuple[int, int, int], ...] = (
        (512, 5, 1), (512, 3, 2), (512, 3, 3), (512, 1, 1), (1500, 1, 1))
    embed_dim: int = 512
    fc2_dim: int = 512
    n_classes: int = 2
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError("embedding dimension must be positive")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        for width, kernel, dilation in self.layers:
            if width < 1 or kernel < 1 or dilation < 1:
                raise ValueError("layer widths, kernels and dilations must be positive")
            if kernel % 2 == 0:
                raise ValueError(f"kernel {kernel} is not symmetric around the center frame")

    @property
    def context_span(self) -> int:
        """Frames consumed by valid dilated convolutions across all layers."""
        return sum((k - 1) * d for _, k, d in self.layers)

    @property
    def pooled_width(self) -> int:
        return 2 * self.layers[-1][0]

    def scaled(self, factor: float) -> "TdnnConfig":
        s = lambda c: max(1, round(c * factor))
        return replace(self,
                       layers=tuple((s(w), k, d) for w, k, d in self.layers),
                       embed_dim=s(self.embed_dim), fc2_dim=s(self.fc2_dim))


@dataclass(frozen=True)
class AmSoftmaxConfig:
    scale: float = 30.0
    margin: float = 0.35

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not 0.0 <= self.margin < 1.0:
            raise ValueError("margin must be in [0, 1)")


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if not np.isfinite(self.vector).all():
            raise ScoringError(f"embedding {self.utterance_id!r} is not finite")


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_aggregator_params(cfg: TdnnConfig, in_channels: int,
                           rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def param(name, data):
        params[name] = Tensor(data, requires_grad=True)

    prev = in_channels
    for i, (width, kernel, _) in enumerate(cfg.layers):
        param(f"tdnn{i}.w", _uniform(rng, (width, prev, kernel), prev * kernel, dtype))
        param(f"tdnn{i}.b", np.zeros(width, dtype=dtype))
        param(f"tdnn{i}.norm_g", np.ones(width, dtype=dtype))
        param(f"tdnn{i}.norm_b", np.zeros(width, dtype=dtype))
        prev = width
    param("fc1.w", _uniform(rng, (cfg.embed_dim, cfg.pooled_width), cfg.pooled_width, dtype))
    param("fc1.b", np.zeros(cfg.embed_dim, dtype=dtype))
    param("fc2.w", _uniform(rng, (cfg.fc2_dim, cfg.embed_dim), cfg.embed_dim, dtype))
    param("fc2.b", np.zeros(cfg.fc2_dim, dtype=dtype))
    param("classes.w", _uniform(rng, (cfg.n_classes, cfg.fc2_dim), cfg.fc2_dim, dtype))
    return params


# ---------------------------------------------------------------------------
# forward


def tdnn_forward(frames: Tensor, cfg: TdnnConfig, params: dict[str, Tensor]) -> Tensor:
    """Dilated valid convolutions, each with channel layer-norm and LeakyReLU."""
    if frames.shape[-1] < cfg.context_span + 1:
        raise nm.InputTooShortError(
            f"tdnn: {frames.shape[-1]} frames < context span {cfg.context_span + 1}")
    h = frames
    for i, (_, kernel, dilation) in enumerate(cfg.layers):
        h = nm.conv1d_valid(h, params[f"tdnn{i}.w"], params[f"tdnn{i}.b"],
                            stride=1, dilation=dilation, layer=f"tdnn{i}")
        h = nm.layer_norm_channels(h, params[f"tdnn{i}.norm_g"], params[f"tdnn{i}.norm_b"])
        h = nm.leaky_relu(h, cfg.leaky_slope)
    return h


def stat_pool(frames: Tensor, eps: float = 1e-10) -> Tensor:
    """Concatenate per-channel mean and population standard deviation over time."""
    if frames.shape[-1] < 1:
        raise nm.ShapeError("stat_pool over an empty frame sequence")
    mu = nm.avgpool_time(frames)                              # (..., D, 1)
    centered = nm.sub(frames, mu)
    var = nm.avgpool_time(nm.mul(centered, centered))
    std = nm.sqrt(nm.add(var, Tensor(np.asarray(eps, dtype=frames.dtype))))
    mu_flat = nm.reshape(mu, mu.shape[:-1])
    std_flat = nm.reshape(std, std.shape[:-1])
    return nm.concat([mu_flat, std_flat], axis=-1)


def head_forward(pooled: Tensor, cfg: TdnnConfig,
                 params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Return (embedding, classifier features).

    The embedding is the pre-activation output of the first post-pooling
    layer; the classifier features are the activated output of the second.
    """
    emb = nm.linear_affine(pooled, params["fc1.w"], params["fc1.b"])
    h = nm.leaky_relu(emb, cfg.leaky_slope)
    h = nm.linear_affine(h, params["fc2.w"], params["fc2.b"])
    features = nm.leaky_relu(h, cfg.leaky_slope)
    return emb, features


def embed_extract(pooled: Tensor, cfg: TdnnConfig, params: dict[str, Tensor],
                  utterance_id: str = "") -> SpeakerEmbedding:
    emb, _ = head_forward(pooled, cfg, params)
    return SpeakerEmbedding(vector=emb.data.astype(np.float32), utterance_id=utterance_id)


# ---------------------------------------------------------------------------
# loss


def _row_normalize(x: Tensor) -> Tensor:
    sq = nm.tsum(nm.mul(x, x), axis=1, keepdims=True)
    return nm.div(x, nm.sqrt(sq))


def am_softmax_loss(features: Tensor, labels: np.ndarray, class_weights: Tensor,
                    cfg: AmSoftmaxConfig) -> Tensor:
    """Additive-margin softmax over scaled cosines, averaged over the batch.

    Features and class weights are length-normalized inside the loss; the
    margin is subtracted from the true-class cosine only.
    """
    if features.ndim != 2:
        raise nm.ShapeError(f"features must be (B, D), got {features.shape}")
    batch, dim = features.shape
    n_classes = class_weights.shape[0]
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise nm.ShapeError(f"labels must be ({batch},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range [0, {n_classes})")
    cos = nm.matmul(_row_normalize(features), nm.transpose(_row_normalize(class_weights)))
    onehot = np.zeros((batch, n_classes), dtype=features.dtype)
    onehot[np.arange(batch), labels] = 1.0
    margin = Tensor(onehot * features.dtype.type(cfg.margin))
    logits = nm.mul(nm.sub(cos, margin), Tensor(np.asarray(cfg.scale, dtype=features.dtype)))
    lse = nm.logsumexp(logits, axis=1)
    true_logit = nm.tsum(nm.mul(logits, Tensor(onehot)), axis=1)
    return nm.tmean(nm.sub(lse, true_logit))


def fc_l2_penalty(params: dict[str, Tensor], lam: float) -> Tensor:
    """lam * (||W_fc1||^2 + ||W_fc2||^2), differentiable."""
    w1, w2 = params["fc1.w"], params["fc2.w"]
    total = nm.add(nm.tsum(nm.mul(w1, w1)), nm.tsum(nm.mul(w2, w2)))
    return nm.mul(total, Tensor(np.asarray(lam, dtype=w1.dtype)))


def cosine_logits(features: np.ndarray, class_weights: np.ndarray) -> np.ndarray:
    """Plain-numpy cosine matrix used for training accuracy bookkeeping."""
    f = features / np.linalg.norm(features, axis=1, keepdims=True)
    w = class_weights / np.linalg.norm(class_weights, axis=1, keepdims=True)
    return f @ w.T


# ---------------------------------------------------------------------------
# scoring


def _vector_of(e) -> tuple[np.ndarray, str]:
    if isinstance(e, SpeakerEmbedding):
        return e.vector, e.utterance_id
    return np.asarray(e), ""


def cosine_score(a, b) -> float:
    va, ida = _vector_of(a)
    vb, idb = _vector_of(b)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0:
        raise ScoringError(f"zero-norm embedding {ida!r}")
    if nb == 0.0:
        raise ScoringError(f"zero-norm embedding {idb!r}")
    return float(np.dot(va, vb) / (na * nb))


# ---------------------------------------------------------------------------
# export formats


def embeddings_to_csv(path, embeddings: Sequence[SpeakerEmbedding]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for e in embeddings:
            writer.writerow([e.utterance_id] + [f"{v:.8e}" for v in e.vector])


def read_embeddings_csv(path) -> list[SpeakerEmbedding]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            out.append(SpeakerEmbedding(vector=np.array(row[1:], dtype=np.float32),
                                        utterance_id=row[0]))
    return out


def embeddings_to_json(path, embeddings: Sequence[SpeakerEmbedding]) -> None:
    rows = [{"utterance_id": e.utterance_id, "vector": [float(v) for v in e.vector]}
            for e in embeddings]
    Path(path).write_text(json.dumps(rows) + "\n")


def embeddings_to_binary(path, embeddings: Sequence[SpeakerEmbedding]) -> None:
    """Little-endian f32 table: u32 count, u32 dim, then count*dim values."""
    if not embeddings:
        raise ValueError("refusing to write an empty embedding table")
    dim = embeddings[0].vector.size
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", len(embeddings), dim))
        for e in embeddings:
            if e.vector.size != dim:
                raise ValueError("embedding dimensions disagree")
            fh.write(e.vector.astype("<f4").tobytes())


def read_embeddings_binary(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated embedding table")
    count, dim = struct.unpack("<II", raw[:8])
    expected = 8 + 4 * count * dim
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(count, dim).copy()
