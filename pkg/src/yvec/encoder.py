"""Multi-scale raw-waveform encoder.

Parallel filtering branches at different time scales feed a shared stack of
downsampling blocks. Each branch is two valid convolutions: a primary
filtering layer and a dimension-match layer whose stride equalizes the total
decimation rate across branches. Every convolution is wrapped in the block
form Conv -> Dropout -> channel layer-norm -> ReLU. Downsampling blocks can
additionally recalibrate their output with a frequency gate followed by a
per-frame time gate (the tf-SE pair), and the encoder can concatenate the
feature maps of all downsampling blocks after max-pooling them to a common
frame rate (multi-level aggregation).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from .numerics import Tensor


class ConfigError(ValueError):
    """An encoder configuration violates a structural invariant."""


@dataclass(frozen=True)
class BranchSpec:
    """Geometry of one filtering branch: primary conv then dimension-match conv."""
    filter_channels: int
    kernel: int
    stride: int
    dm_channels: int
    dm_kernel: int = 5
    dm_stride: int = 1

    def __post_init__(self):
        for name in ("filter_channels", "kernel", "stride", "dm_channels",
                     "dm_kernel", "dm_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"BranchSpec.{name} must be positive")
        # the half-overlap rule (kernel == 2 * stride) is advisory so that
        # degenerate test geometries stay constructible; shipped presets obey it
        if self.kernel != 2 * self.stride:
            warnings.warn(
                f"filtering kernel {self.kernel} is not twice the stride {self.stride}",
                stacklevel=2)
        # the dimension-match layer is fixed at kernel 5 by design and is
        # exempt from the rule; other kernels get the same warning
        if self.dm_kernel != 5 and self.dm_kernel != 2 * self.dm_stride:
            warnings.warn(
                f"dimension-match kernel {self.dm_kernel} is neither 5 nor twice "
                f"the stride {self.dm_stride}", stacklevel=2)

    @property
    def decimation(self) -> int:
        return self.stride * self.dm_stride


@dataclass(frozen=True)
class EncoderConfig:
    branches: tuple[BranchSpec, ...]
    downsample_blocks: tuple[tuple[int, int, int], ...]  # (channels, kernel, stride)
    multilevel_aggregation: bool = True
    tfse_enabled: bool = True
    dropout_rate: float = 0.1

    def __post_init__(self):
        if not self.branches:
            raise ConfigError("encoder needs at least one branch")
        if not self.downsample_blocks:
            raise ConfigError("encoder needs at least one downsampling block")
        decimations = {b.decimation for b in self.branches}
        if len(decimations) != 1:
            raise ConfigError(
                f"branch decimation rates must be identical, got {sorted(decimations)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def concat_channels(self) -> int:
        """Input channel count of the first downsampling block."""
        return sum(b.dm_channels for b in self.branches)

    @property
    def decimation(self) -> int:
        return self.branches[0].decimation

    @property
    def output_channels(self) -> int:
        if self.multilevel_aggregation:
            return sum(c for c, _, _ in self.downsample_blocks)
        return self.downsample_blocks[-1][0]


def _table_branches() -> tuple[BranchSpec, ...]:
    return (
        BranchSpec(90, 12, 6, 160, 5, 3),
        BranchSpec(90, 18, 9, 160, 5, 2),
        BranchSpec(90, 36, 18, 192, 5, 1),
    )


def _dec24_branches(channels: int) -> tuple[BranchSpec, ...]:
    return (
        BranchSpec(channels, 16, 8, 160, 5, 3),
        BranchSpec(channels, 24, 12, 160, 5, 2),
        BranchSpec(channels, 48, 24, 192, 5, 1),
    )


_DS_512 = ((512, 5, 2), (512, 3, 2), (512, 3, 2))


def _build_presets() -> dict[str, EncoderConfig]:
    return {
        "yvector-1": EncoderConfig(_dec24_branches(50), _DS_512,
                                   multilevel_aggregation=False, tfse_enabled=False),
        "yvector-2": EncoderConfig(_dec24_branches(50), _DS_512,
                                   multilevel_aggregation=True, tfse_enabled=False),
        "yvector-3": EncoderConfig(_dec24_branches(90), _DS_512,
                                   multilevel_aggregation=True, tfse_enabled=False),
        "yvector-4": EncoderConfig(_table_branches(), _DS_512,
                                   multilevel_aggregation=True, tfse_enabled=False),
        "yvector-5": EncoderConfig(_table_branches(), _DS_512,
                                   multilevel_aggregation=True, tfse_enabled=True),
        "single-low": EncoderConfig((BranchSpec(96, 40, 20, 512, 5, 1),), _DS_512),
        "single-mid": EncoderConfig((BranchSpec(96, 20, 10, 512, 5, 2),), _DS_512),
        "single-high": EncoderConfig((BranchSpec(96, 10, 5, 512, 5, 4),), _DS_512),
        "multi-32": EncoderConfig((BranchSpec(32, 10, 5, 160, 5, 4),
                                   BranchSpec(32, 20, 10, 160, 5, 2),
                                   BranchSpec(32, 40, 20, 192, 5, 1)), _DS_512),
    }


PRESET_NAMES = tuple(_build_presets().keys())


def get_preset(name: str) -> EncoderConfig:
    presets = _build_presets()
    if name not in presets:
        raise ConfigError(f"unknown encoder preset {name!r}; known: {', '.join(presets)}")
    return presets[name]


def scale_widths(cfg: EncoderConfig, factor: float) -> EncoderConfig:
    """Channel-reduced copy of a config (kernel/stride geometry untouched)."""
    if factor <= 0:
        raise ConfigError("width factor must be positive")

    def s(c: int) -> int:
        return max(1, round(c * factor))

    branches = tuple(replace(b, filter_channels=s(b.filter_channels),
                             dm_channels=s(b.dm_channels)) for b in cfg.branches)
    blocks = tuple((s(c), k, st) for c, k, st in cfg.downsample_blocks)
    return replace(cfg, branches=branches, downsample_blocks=blocks)


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in-scaled uniform conv/linear weights, unit norm gains, zero biases."""
    params: dict[str, Tensor] = {}

    def param(name, data):
        params[name] = Tensor(data, requires_grad=True)

    for i, b in enumerate(cfg.branches):
        param(f"branch{i}.filter.w", _uniform(rng, (b.filter_channels, 1, b.kernel),
                                              b.kernel, dtype))
        param(f"branch{i}.filter.b", np.zeros(b.filter_channels, dtype=dtype))
        param(f"branch{i}.filter.norm_g", np.ones(b.filter_channels, dtype=dtype))
        param(f"branch{i}.filter.norm_b", np.zeros(b.filter_channels, dtype=dtype))
        fan = b.filter_channels * b.dm_kernel
        param(f"branch{i}.dm.w", _uniform(rng, (b.dm_channels, b.filter_channels,
                                                b.dm_kernel), fan, dtype))
        param(f"branch{i}.dm.b", np.zeros(b.dm_channels, dtype=dtype))
        param(f"branch{i}.dm.norm_g", np.ones(b.dm_channels, dtype=dtype))
        param(f"branch{i}.dm.norm_b", np.zeros(b.dm_channels, dtype=dtype))
    in_ch = cfg.concat_channels
    for j, (out_ch, kernel, _) in enumerate(cfg.downsample_blocks):
        param(f"ds{j}.conv.w", _uniform(rng, (out_ch, in_ch, kernel), in_ch * kernel, dtype))
        param(f"ds{j}.conv.b", np.zeros(out_ch, dtype=dtype))
        param(f"ds{j}.norm_g", np.ones(out_ch, dtype=dtype))
        param(f"ds{j}.norm_b", np.zeros(out_ch, dtype=dtype))
        if cfg.tfse_enabled:
            param(f"ds{j}.tfse.w1", _uniform(rng, (out_ch, out_ch), out_ch, dtype))
            param(f"ds{j}.tfse.b1", np.zeros(out_ch, dtype=dtype))
            param(f"ds{j}.tfse.w2", _uniform(rng, (out_ch, 1), out_ch, dtype))
            param(f"ds{j}.tfse.b2", np.zeros(1, dtype=dtype))
        in_ch = out_ch
    return params


def branch_filter_kernels(params: dict[str, Tensor], branch: int) -> np.ndarray:
    """Primary filtering kernels of one branch as a (channels, taps) array."""
    return params[f"branch{branch}.filter.w"].data[:, 0, :].copy()


# ---------------------------------------------------------------------------
# forward pieces


def _block(x: Tensor, w: Tensor, b: Tensor, norm_g: Tensor, norm_b: Tensor,
           stride: int, dropout_rate: float, training: bool,
           rng: Optional[np.random.Generator], layer: str) -> Tensor:
    """Conv -> Dropout -> channel layer-norm -> ReLU."""
    h = nm.conv1d_valid(x, w, b, stride=stride, layer=layer)
    h = nm.dropout(h, dropout_rate, training, rng)
    h = nm.layer_norm_channels(h, norm_g, norm_b)
    return nm.relu(h)


def multi_scale_filter(wave: Tensor, cfg: EncoderConfig, params: dict[str, Tensor],
                       training: bool = False,
                       rng: Optional[np.random.Generator] = None) -> Tensor:
    """Run every branch and concatenate along channels.

    Branch output lengths differ by a few frames because each branch sees a
    different receptive field; all are truncated to the shortest before
    concatenation.
    """
    outputs = []
    for i, b in enumerate(cfg.branches):
        h = _block(wave, params[f"branch{i}.filter.w"], params[f"branch{i}.filter.b"],
                   params[f"branch{i}.filter.norm_g"], params[f"branch{i}.filter.norm_b"],
                   b.stride, cfg.dropout_rate, training, rng, layer=f"branch{i}/filter")
        h = _block(h, params[f"branch{i}.dm.w"], params[f"branch{i}.dm.b"],
                   params[f"branch{i}.dm.norm_g"], params[f"branch{i}.dm.norm_b"],
                   b.dm_stride, cfg.dropout_rate, training, rng, layer=f"branch{i}/dm")
        outputs.append(h)
    t_min = min(h.shape[-1] for h in outputs)
    outputs = [h if h.shape[-1] == t_min else nm.narrow(h, h.ndim - 1, 0, t_min)
               for h in outputs]
    return outputs[0] if len(outputs) == 1 else nm.concat(outputs, axis=-2)


def recalibrate_frequency(x: Tensor, w1: Tensor, b1: Tensor) -> Tensor:
    """Channel gate from time-averaged statistics, broadcast over all frames."""
    pooled = nm.avgpool_time(x)                         # (..., F, 1)
    squeezed = nm.reshape(pooled, pooled.shape[:-1])    # (..., F)
    gate = nm.sigmoid(nm.linear_affine(squeezed, w1, b1))
    gate = nm.reshape(gate, gate.shape + (1,))
    return nm.mul(gate, x)


def recalibrate_time(x: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """One scalar sigmoid gate per frame, scaling the whole column."""
    channels = x.shape[-2]
    if w2.shape != (channels, 1):
        raise nm.ShapeError(f"time-gate weight must be ({channels}, 1), got {w2.shape}")
    kernel = nm.reshape(w2, (1, channels, 1))
    z = nm.conv1d_valid(x, kernel, b2, stride=1, layer="tfse/time-gate")
    return nm.mul(nm.sigmoid(z), x)


def downsample_block(x: Tensor, cfg: EncoderConfig, params: dict[str, Tensor],
                     index: int, training: bool = False,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
    _, _, stride = cfg.downsample_blocks[index]
    h = _block(x, params[f"ds{index}.conv.w"], params[f"ds{index}.conv.b"],
               params[f"ds{index}.norm_g"], params[f"ds{index}.norm_b"],
               stride, cfg.dropout_rate, training, rng, layer=f"ds{index}/conv")
    if cfg.tfse_enabled:
        h = recalibrate_frequency(h, params[f"ds{index}.tfse.w1"], params[f"ds{index}.tfse.b1"])
        h = recalibrate_time(h, params[f"ds{index}.tfse.w2"], params[f"ds{index}.tfse.b2"])
    return h


def multilevel_aggregate(maps: Sequence[Tensor], factors: Sequence[int]) -> Tensor:
    """Max-pool earlier maps down to the last map's frame rate and concatenate.

    ``factors[i]`` is the remaining decimation of map i relative to the last
    map (the last factor is 1). Pooling uses window == stride == factor.
    """
    if len(maps) != len(factors):
        raise ConfigError("one decimation factor per feature map is required")
    if len(maps) == 1:
        return maps[0]
    t_last = maps[-1].shape[-1]
    pooled = []
    for m, f in zip(maps, factors):
        if f < 1:
            raise ConfigError(f"decimation factor must be >= 1, got {f}")
        p = m if f == 1 else nm.maxpool1d(m, f, f, layer="multilevel/pool")
        if p.shape[-1] < t_last:
            raise ConfigError(
                f"inconsistent frame-rate ratios: pooled length {p.shape[-1]} < {t_last}")
        if p.shape[-1] > t_last:
            p = nm.narrow(p, p.ndim - 1, 0, t_last)
        pooled.append(p)
    return nm.concat(pooled, axis=-2)


def encode(wave: Tensor, cfg: EncoderConfig, params: dict[str, Tensor],
           training: bool = False,
           rng: Optional[np.random.Generator] = None) -> Tensor:
    """Full encoder: branches, downsampling stack, optional aggregation."""
    h = multi_scale_filter(wave, cfg, params, training, rng)
    maps = []
    for j in range(len(cfg.downsample_blocks)):
        h = downsample_block(h, cfg, params, j, training, rng)
        maps.append(h)
    if not cfg.multilevel_aggregation:
        return maps[-1]
    strides = [s for _, _, s in cfg.downsample_blocks]
    factors = [int(np.prod(strides[j + 1:])) for j in range(len(strides))]
    return multilevel_aggregate(maps, factors)
