"""Assembly of the waveform encoder and frame aggregator into one model."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import aggregator, encoder
from . import numerics as nm
from .numerics import Tensor


def encoder_config_to_dict(cfg: encoder.EncoderConfig) -> dict:
    return {
        "branches": [[b.filter_channels, b.kernel, b.stride,
                      b.dm_channels, b.dm_kernel, b.dm_stride] for b in cfg.branches],
        "downsample_blocks": [list(blk) for blk in cfg.downsample_blocks],
        "multilevel_aggregation": cfg.multilevel_aggregation,
        "tfse_enabled": cfg.tfse_enabled,
        "dropout_rate": cfg.dropout_rate,
    }


def encoder_config_from_dict(d: dict) -> encoder.EncoderConfig:
    return encoder.EncoderConfig(
        branches=tuple(encoder.BranchSpec(*row) for row in d["branches"]),
        downsample_blocks=tuple(tuple(blk) for blk in d["downsample_blocks"]),
        multilevel_aggregation=bool(d["multilevel_aggregation"]),
        tfse_enabled=bool(d["tfse_enabled"]),
        dropout_rate=float(d["dropout_rate"]),
    )


def tdnn_config_to_dict(cfg: aggregator.TdnnConfig) -> dict:
    return {
        "layers": [list(layer) for layer in cfg.layers],
        "embed_dim": cfg.embed_dim,
        "fc2_dim": cfg.fc2_dim,
        "n_classes": cfg.n_classes,
        "leaky_slope": cfg.leaky_slope,
    }


def tdnn_config_from_dict(d: dict) -> aggregator.TdnnConfig:
    return aggregator.TdnnConfig(
        layers=tuple(tuple(layer) for layer in d["layers"]),
        embed_dim=int(d["embed_dim"]),
        fc2_dim=int(d["fc2_dim"]),
        n_classes=int(d["n_classes"]),
        leaky_slope=float(d["leaky_slope"]),
    )


class SpeakerNet:
    """Encoder plus aggregator with one flat parameter namespace."""

    def __init__(self, enc_cfg: encoder.EncoderConfig, tdnn_cfg: aggregator.TdnnConfig,
                 seed: int = 0, dtype=np.float32):
        self.enc_cfg = enc_cfg
        self.tdnn_cfg = tdnn_cfg
        rng = np.random.default_rng([seed, 0x59EC])
        self.enc_params = encoder.init_encoder_params(enc_cfg, rng, dtype)
        self.agg_params = aggregator.init_aggregator_params(
            tdnn_cfg, enc_cfg.output_channels, rng, dtype)

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for k, v in self.enc_params.items():
            yield f"encoder/{k}", v
        for k, v in self.agg_params.items():
            yield f"aggregator/{k}", v

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def load_parameter_data(self, blobs: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        if set(blobs) != set(named):
            missing = set(named) - set(blobs)
            extra = set(blobs) - set(named)
            raise ValueError(f"parameter names disagree (missing={sorted(missing)[:3]}, "
                             f"unexpected={sorted(extra)[:3]})")
        for name, data in blobs.items():
            p = named[name]
            if p.data.shape != data.shape:
                raise ValueError(f"{name}: shape {data.shape} != expected {p.data.shape}")
            p.data = data.astype(p.data.dtype, copy=True)

    # -- forward ------------------------------------------------------------

    def forward_batch(self, waves: np.ndarray, training: bool = False,
                      rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
        """(B, L) float waveforms -> (embeddings (B, E), classifier features (B, F))."""
        waves = np.asarray(waves)
        if waves.ndim != 2:
            raise nm.ShapeError(f"expected a (B, L) batch, got {waves.shape}")
        x = Tensor(np.ascontiguousarray(waves[:, None, :]))
        feats = encoder.encode(x, self.enc_cfg, self.enc_params, training, rng)
        frames = aggregator.tdnn_forward(feats, self.tdnn_cfg, self.agg_params)
        pooled = aggregator.stat_pool(frames)
        return aggregator.head_forward(pooled, self.tdnn_cfg, self.agg_params)

    def embed_batch(self, waves: np.ndarray) -> np.ndarray:
        emb, _ = self.forward_batch(waves, training=False)
        return emb.data.astype(np.float32)

    @property
    def class_weights(self) -> Tensor:
        return self.agg_params["classes.w"]

    @property
    def embed_dim(self) -> int:
        return self.tdnn_cfg.embed_dim

    # -- length arithmetic ---------------------------------------------------

    def output_frames(self, n_samples: int) -> int:
        """Aggregator output frames for an input of ``n_samples``; <=0 if too short."""
        t_branch = []
        for b in self.enc_cfg.branches:
            t1 = (n_samples - b.kernel) // b.stride + 1
            if t1 < b.dm_kernel:
                return 0
            t_branch.append((t1 - b.dm_kernel) // b.dm_stride + 1)
        t = min(t_branch)
        for _, kernel, stride in self.enc_cfg.downsample_blocks:
            if t < kernel:
                return 0
            t = (t - kernel) // stride + 1
        return t - self.tdnn_cfg.context_span

    def min_input_samples(self) -> int:
        lo, hi = 1, 1
        while self.output_frames(hi) < 1:
            hi *= 2
        while lo < hi:
            mid = (lo + hi) // 2
            if self.output_frames(mid) >= 1:
                hi = mid
            else:
                lo = mid + 1
        return lo

    # -- config round trip ----------------------------------------------------

    def config_dict(self) -> dict:
        return {"encoder": encoder_config_to_dict(self.enc_cfg),
                "tdnn": tdnn_config_to_dict(self.tdnn_cfg)}

    @classmethod
    def from_config_dict(cls, d: dict, seed: int = 0, dtype=np.float32) -> "SpeakerNet":
        return cls(encoder_config_from_dict(d["encoder"]),
                   tdnn_config_from_dict(d["tdnn"]), seed=seed, dtype=dtype)
