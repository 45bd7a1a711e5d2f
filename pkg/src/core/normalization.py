"""Normalization statistics and differentiable BN / IN / WIN layers.

Training-time WIN statistics come from a sampled spatial region and are
mixed with the instance (global) statistics using lambda ~ Beta(a, a) per
(n, c). In evaluation WIN uses the instance statistics only, so a WIN
layer in eval mode is exactly an IN layer.
"""

from dataclasses import dataclass
from typing import Dict, Literal, Optional, Protocol, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core import tensor as T
from src.core.exceptions import ConfigError, DegenerateInputError, ShapeError
from src.core.rng import Rng
from src.core.tensor import Tensor
from src.core.window_sampling import (
    BlockPartition,
    OnlineRegionSource,
    RegionDraw,
    WindowSpec,
    partition_blocks,
)

NormKind = Literal["BN", "IN", "WIN"]
Strategy = Literal["Window", "Block", "Global", "Pixel", "Mask", "Speckle"]
StatSubset = Literal["both", "mean_only", "var_only"]


class NormConfig(BaseModel):
    """Normalization layer configuration."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: NormKind = "WIN"
    strategy: Strategy = "Window"
    tau: float = Field(default=0.7, gt=0.0, le=1.0)
    alpha: float = Field(default=0.1, gt=0.0)
    eps: float = Field(default=1e-5, gt=0.0)
    stat_subset: StatSubset = "both"
    mixing: bool = True
    affine: Optional[bool] = None  # None: on for BN, off for IN / WIN
    eval_uses_global: Literal[True] = True
    momentum: float = Field(default=0.9, ge=0.0, le=1.0)
    speckle_magnitude: float = Field(default=0.2, gt=0.0)
    patch_size: Tuple[int, int] = (8, 8)
    share_window_across_layers: bool = False

    def use_affine(self) -> bool:
        return self.kind == "BN" if self.affine is None else self.affine


@dataclass
class StatsNC:
    """Per-(instance, channel) mean and population variance."""

    mean: Tensor
    var: Tensor


@dataclass
class StatsC:
    """Per-channel batch statistics with running averages."""

    mean: Tensor
    var: Tensor
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = 0.9


@dataclass
class AffineParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def identity(cls, channels: int) -> "AffineParams":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
        )


Region = Union[np.ndarray, WindowSpec, RegionDraw, None]


# Statistics

def bn_stats(f: Tensor) -> StatsC:
    """Per-channel mean/variance over (N, H, W)."""
    if f.ndim != 4:
        raise ShapeError(f"Expected a rank-4 tensor, got shape {f.shape}")
    if f.shape[0] * f.shape[2] * f.shape[3] == 0:
        raise DegenerateInputError("bn_stats on an empty tensor")
    mean, var = T.moments(f, (0, 2, 3))
    return StatsC(mean=mean, var=var)


def bn_update_running(stats: StatsC, batch: StatsC, p: float) -> StatsC:
    """running' = p * running + (1 - p) * batch, for both mean and var."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"Momentum must lie in [0, 1], got {p}")
    running_mean = stats.running_mean if stats.running_mean is not None else np.zeros(batch.mean.shape)
    running_var = stats.running_var if stats.running_var is not None else np.ones(batch.var.shape)
    return StatsC(
        mean=batch.mean,
        var=batch.var,
        running_mean=p * running_mean + (1.0 - p) * batch.mean.data,
        running_var=p * running_var + (1.0 - p) * batch.var.data,
        momentum=p,
    )


def in_stats(f: Tensor) -> StatsNC:
    """Per-(n, c) spatial statistics."""
    mean, var = T.reduce_mean_var(f, None)
    return StatsNC(mean, var)


def _region_mask(region: Region, dims: Tuple[int, int]) -> Optional[np.ndarray]:
    if region is None:
        return None
    if isinstance(region, WindowSpec):
        if not region.is_valid(dims):
            raise DegenerateInputError(f"Window {region} does not fit a {dims} plane")
        mask = region.to_mask(dims)
    elif isinstance(region, RegionDraw):
        mask = region.to_mask()
    else:
        mask = np.asarray(region, dtype=bool)
    if not mask.any():
        raise DegenerateInputError("Empty region")
    return None if mask.all() else mask


def win_stats(f: Tensor, region: Region) -> StatsNC:
    """
    Per-(n, c) statistics over the region's pixels only.

    The same region applies to every (n, c). For block draws the statistics
    are pooled over the union of selected blocks.

    Args:
        f: N x C x H x W features
        region: Boolean H x W mask, WindowSpec or RegionDraw

    Returns:
        StatsNC
    """
    mask = _region_mask(region, f.shape[2:])
    mean, var = T.reduce_mean_var(f, mask)
    return StatsNC(mean, var)


def speckle_stats(f: Tensor, rng: Rng, magnitude: float) -> StatsNC:
    """Instance statistics perturbed multiplicatively by N(0, magnitude^2) noise."""
    if magnitude <= 0:
        raise ConfigError(f"Speckle magnitude must be positive, got {magnitude}")
    stats = in_stats(f)
    shape = stats.mean.shape
    mean_scale = 1.0 + rng.normal(0.0, magnitude, shape)
    var_scale = np.abs(1.0 + rng.normal(0.0, magnitude, shape))
    return StatsNC(
        mean=T.mul(stats.mean, mean_scale.astype(f.dtype)),
        var=T.mul(stats.var, var_scale.astype(f.dtype)),
    )


def mix_stats(local: StatsNC, global_: StatsNC, lam: np.ndarray, stat_subset: str = "both") -> StatsNC:
    """
    Convex mixing of local and global statistics.

    Args:
        local: Window (or block, speckle, ...) statistics
        global_: Instance statistics
        lam: N x C weights in [0, 1] on the local term
        stat_subset: both, mean_only (variance stays global) or var_only

    Returns:
        Mixed StatsNC
    """
    if stat_subset not in ("both", "mean_only", "var_only"):
        raise ConfigError(f"Unknown statistic subset: {stat_subset}")
    lam = np.asarray(lam, dtype=local.mean.dtype)
    if lam.shape != local.mean.shape or global_.mean.shape != local.mean.shape:
        raise ShapeError(f"Mixing shapes disagree: lambda {lam.shape}, stats {local.mean.shape}")
    if np.any(lam < 0) or np.any(lam > 1):
        raise ConfigError("lambda must lie in [0, 1]")
    rest = 1.0 - lam
    mean, var = global_.mean, global_.var
    if stat_subset in ("both", "mean_only"):
        mean = T.add(T.mul(lam, local.mean), T.mul(rest, global_.mean))
    if stat_subset in ("both", "var_only"):
        var = T.add(T.mul(lam, local.var), T.mul(rest, global_.var))
    return StatsNC(mean, var)


def standardize_affine(
    f: Tensor,
    stats: Union[StatsNC, StatsC],
    eps: float,
    affine: Optional[AffineParams] = None,
) -> Tensor:
    """(f - mean) / sqrt(var + eps), then gamma * . + beta when affine is given."""
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    out = T.div(T.sub(f, stats.mean), T.sqrt(T.add(stats.var, eps)))
    if affine is not None:
        out = T.add(T.mul(out, affine.gamma), affine.beta)
    return out


def invert_standardize(
    out: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float,
    affine: Optional[AffineParams] = None,
) -> np.ndarray:
    """Exact inverse of standardize_affine for given statistics."""
    mean, var = np.asarray(mean), np.asarray(var)
    shape = mean.shape + (1, 1) if mean.ndim == 2 else (1, -1, 1, 1)
    if affine is not None:
        out = (out - affine.beta.data.reshape(1, -1, 1, 1)) / affine.gamma.data.reshape(1, -1, 1, 1)
    return out * np.sqrt(var.reshape(shape) + eps) + mean.reshape(shape)


# Layers

class RegionSource(Protocol):
    def region(self, layer_id: str, step: int, dims: Tuple[int, int],
               partition: Optional[BlockPartition] = None) -> np.ndarray:
        ...


@dataclass
class ForwardContext:
    """Per-forward-pass switches and randomness."""

    mode: Literal["train", "eval"] = "train"
    step: int = 0
    regions: Optional[RegionSource] = None
    mix_rng: Optional[Rng] = None
    noise_rng: Optional[Rng] = None

    @classmethod
    def evaluation(cls) -> "ForwardContext":
        return cls(mode="eval")


def _summarize(mean: Tensor, var: Tensor) -> Dict[str, float]:
    return {
        "mean_abs_mean": float(np.mean(np.abs(mean.data))),
        "mean_var": float(np.mean(var.data)),
        "min_var": float(np.min(var.data)),
    }


class NormLayer:
    """Base class; holds config, optional affine params and a stats summary."""

    kind = ""

    def __init__(self, config: NormConfig, channels: int, layer_id: str,
                 input_dims: Optional[Tuple[int, int]] = None):
        self.config = config
        self.channels = channels
        self.layer_id = layer_id
        self.input_dims = input_dims
        self.affine = AffineParams.identity(channels) if config.use_affine() else None
        self.last_stats: Dict[str, float] = {}

    def parameters(self) -> Dict[str, Tensor]:
        if self.affine is None:
            return {}
        return {f"{self.layer_id}.gamma": self.affine.gamma, f"{self.layer_id}.beta": self.affine.beta}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def load_buffers(self, buffers: Dict[str, np.ndarray]):
        pass

    def forward(self, f: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def _check(self, f: Tensor):
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise ShapeError(f"{self.layer_id} expects C={self.channels}, got input {f.shape}")


class BatchNorm2d(NormLayer):
    """Batch statistics in training (with running update), running statistics in eval."""

    kind = "BN"

    def __init__(self, config: NormConfig, channels: int, layer_id: str,
                 input_dims: Optional[Tuple[int, int]] = None):
        super().__init__(config, channels, layer_id, input_dims)
        self.running = StatsC(
            mean=Tensor(np.zeros(channels)),
            var=Tensor(np.ones(channels)),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=config.momentum,
        )

    def buffers(self) -> Dict[str, np.ndarray]:
        return {
            f"{self.layer_id}.running_mean": self.running.running_mean,
            f"{self.layer_id}.running_var": self.running.running_var,
        }

    def load_buffers(self, buffers: Dict[str, np.ndarray]):
        self.running.running_mean = np.asarray(buffers[f"{self.layer_id}.running_mean"], dtype=np.float64)
        self.running.running_var = np.asarray(buffers[f"{self.layer_id}.running_var"], dtype=np.float64)

    def forward(self, f: Tensor, ctx: ForwardContext) -> Tensor:
        self._check(f)
        if ctx.mode == "train":
            batch = bn_stats(f)
            self.running = bn_update_running(self.running, batch, self.config.momentum)
            stats = batch
        else:
            stats = StatsC(
                mean=Tensor(self.running.running_mean, dtype=f.dtype),
                var=Tensor(self.running.running_var, dtype=f.dtype),
            )
        self.last_stats = _summarize(stats.mean, stats.var)
        return standardize_affine(f, stats, self.config.eps, self.affine)


class InstanceNorm2d(NormLayer):
    """Instance statistics in both modes."""

    kind = "IN"

    def forward(self, f: Tensor, ctx: ForwardContext) -> Tensor:
        self._check(f)
        stats = in_stats(f)
        self.last_stats = _summarize(stats.mean, stats.var)
        return standardize_affine(f, stats, self.config.eps, self.affine)


class WindowNorm2d(NormLayer):
    """Mixed local/global statistics in training, instance statistics in eval."""

    kind = "WIN"

    def __init__(self, config: NormConfig, channels: int, layer_id: str,
                 input_dims: Optional[Tuple[int, int]] = None):
        super().__init__(config, channels, layer_id, input_dims)
        self._partitions: Dict[Tuple[int, int], BlockPartition] = {}

    def partition_for(self, dims: Tuple[int, int]) -> Optional[BlockPartition]:
        if self.config.strategy != "Block":
            return None
        if dims not in self._partitions:
            self._partitions[dims] = partition_blocks(self.input_dims or dims, self.config.patch_size, dims)
        return self._partitions[dims]

    def local_stats(self, f: Tensor, ctx: ForwardContext) -> StatsNC:
        cfg = self.config
        if cfg.strategy == "Speckle":
            if ctx.noise_rng is None:
                raise ConfigError("Speckle statistics need a noise stream")
            return speckle_stats(f, ctx.noise_rng, cfg.speckle_magnitude)
        if ctx.regions is None:
            raise ConfigError(f"{self.layer_id}: training-mode WIN needs a region source")
        dims = tuple(f.shape[2:])
        mask = ctx.regions.region(self.layer_id, ctx.step, dims, self.partition_for(dims))
        return win_stats(f, mask)

    def forward(self, f: Tensor, ctx: ForwardContext) -> Tensor:
        self._check(f)
        cfg = self.config
        global_ = in_stats(f)
        if ctx.mode == "eval":
            stats = global_
        else:
            local = self.local_stats(f, ctx)
            if cfg.mixing:
                if ctx.mix_rng is None:
                    raise ConfigError(f"{self.layer_id}: mixing needs a lambda stream")
                lam = ctx.mix_rng.beta(cfg.alpha, size=global_.mean.shape)
            else:
                lam = np.ones(global_.mean.shape)
            stats = mix_stats(local, global_, lam, cfg.stat_subset)
        self.last_stats = _summarize(stats.mean, stats.var)
        return standardize_affine(f, stats, cfg.eps, self.affine)


_LAYERS = {"BN": BatchNorm2d, "IN": InstanceNorm2d, "WIN": WindowNorm2d}


def build_norm_layer(config: NormConfig, channels: int, layer_id: str,
                     input_dims: Optional[Tuple[int, int]] = None) -> NormLayer:
    try:
        return _LAYERS[config.kind](config, channels, layer_id, input_dims)
    except KeyError:
        raise ConfigError(f"Unknown normalization kind: {config.kind}")


def norm_layer_forward(
    f: Tensor,
    config: NormConfig,
    mode: str,
    rng: Optional[Rng] = None,
    cache: Optional[RegionSource] = None,
    layer: Optional[NormLayer] = None,
    step: int = 0,
) -> Tensor:
    """
    Functional entry point: run one normalization layer on `f`.

    Args:
        f: N x C x H x W features
        config: Layer configuration
        mode: "train" or "eval"
        rng: Run stream; "window", "mix" and "speckle" children are derived from it
        cache: Offline region source replacing online window draws
        layer: Existing layer (keeps BN running buffers and affine params)
        step: Step index used to key cached regions

    Returns:
        Normalized tensor
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"Unknown mode: {mode}")
    layer = layer or build_norm_layer(config, f.shape[1], "norm", tuple(f.shape[2:]))
    regions, mix_rng, noise_rng = cache, None, None
    if rng is not None:
        mix_rng = rng.stream("mix")
        noise_rng = rng.stream("speckle")
        if regions is None and config.strategy != "Speckle":
            regions = OnlineRegionSource(
                rng.stream("window"),
                config.strategy,
                config.tau,
                config.share_window_across_layers,
            )
    ctx = ForwardContext(mode=mode, step=step, regions=regions, mix_rng=mix_rng, noise_rng=noise_rng)
    return layer.forward(f, ctx)
