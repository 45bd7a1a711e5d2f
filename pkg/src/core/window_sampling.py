"""Spatial region samplers for local normalization statistics.

Strategies:
    Global  every pixel
    Window  one random rectangle whose area is at least tau * H * W
    Block   a random tau-fraction of a fixed non-overlapping block grid
    Pixel   i.i.d. Bernoulli(tau) keep-mask
    Mask    everything except one random rectangle of area >= (1 - tau) * H * W
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from src.core.exceptions import ConfigError, DegenerateInputError
from src.core.rng import Rng
from src.utils.logger import logger

STRATEGIES = ("Global", "Window", "Block", "Pixel", "Mask")
MAX_WINDOW_TRIES = 1000
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class WindowSpec:
    """Half-open rectangle: x0 <= w < x1, y0 <= h < y1."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def is_valid(self, dims: Tuple[int, int]) -> bool:
        h, w = dims
        return 0 <= self.x0 < self.x1 <= w and 0 <= self.y0 < self.y1 <= h

    def to_mask(self, dims: Tuple[int, int]) -> np.ndarray:
        mask = np.zeros(dims, dtype=bool)
        mask[self.y0:self.y1, self.x0:self.x1] = True
        return mask

    def rescale(self, src: Tuple[int, int], dst: Tuple[int, int]) -> "WindowSpec":
        """Map to another resolution, rounding outward so the area fraction never shrinks."""
        sy = dst[0] / src[0]
        sx = dst[1] / src[1]
        return WindowSpec(
            x0=max(0, math.floor(self.x0 * sx)),
            y0=max(0, math.floor(self.y0 * sy)),
            x1=min(dst[1], max(math.ceil(self.x1 * sx), math.floor(self.x0 * sx) + 1)),
            y1=min(dst[0], max(math.ceil(self.y1 * sy), math.floor(self.y0 * sy) + 1)),
        )

    def to_dict(self) -> Dict[str, int]:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}


def full_window(dims: Tuple[int, int]) -> WindowSpec:
    h, w = dims
    return WindowSpec(0, 0, w, h)


@dataclass(frozen=True)
class BlockPartition:
    """Non-overlapping block grid tied to input-image patches."""

    input_dims: Tuple[int, int]
    patch_dims: Tuple[int, int]
    feature_dims: Tuple[int, int]
    rows: int
    cols: int
    block_h: int
    block_w: int

    @property
    def block_count(self) -> int:
        return self.rows * self.cols

    def block_rect(self, index: int) -> WindowSpec:
        row, col = divmod(index, self.cols)
        return WindowSpec(
            x0=col * self.block_w,
            y0=row * self.block_h,
            x1=(col + 1) * self.block_w,
            y1=(row + 1) * self.block_h,
        )

    def blocks_to_mask(self, indices: Sequence[int]) -> np.ndarray:
        mask = np.zeros(self.feature_dims, dtype=bool)
        for index in indices:
            rect = self.block_rect(int(index))
            mask[rect.y0:rect.y1, rect.x0:rect.x1] = True
        return mask


def partition_blocks(
    input_dims: Tuple[int, int],
    patch_dims: Tuple[int, int],
    feature_dims: Tuple[int, int],
) -> BlockPartition:
    """
    Divide a feature plane into the blocks that correspond to input patches.

    Args:
        input_dims: (H0, W0) of the network input
        patch_dims: (patch height, patch width) in input pixels
        feature_dims: (H, W) of the feature map at this scale

    Returns:
        BlockPartition with B = (H0 / patch_h) * (W0 / patch_w) blocks

    Raises:
        ConfigError: Non-divisible dims or blocks smaller than a pixel
    """
    (h0, w0), (ph, pw), (h, w) = input_dims, patch_dims, feature_dims
    if ph <= 0 or pw <= 0 or h0 % ph or w0 % pw:
        raise ConfigError(f"Input {input_dims} is not divisible by patch {patch_dims}")
    sy, sx = Fraction(h, h0), Fraction(w, w0)
    block_h, block_w = sy * ph, sx * pw
    if block_h.denominator != 1 or block_w.denominator != 1 or block_h < 1 or block_w < 1:
        raise ConfigError(
            f"Patch {patch_dims} maps to a fractional or sub-pixel block at feature dims {feature_dims}"
        )
    return BlockPartition(
        input_dims=(h0, w0),
        patch_dims=(ph, pw),
        feature_dims=(h, w),
        rows=h0 // ph,
        cols=w0 // pw,
        block_h=int(block_h),
        block_w=int(block_w),
    )


def _check_tau(tau: float):
    if not 0 < tau <= 1:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")


def _window_attempt(rng: Rng, dims: Tuple[int, int]) -> WindowSpec:
    """One candidate: scaled size, uniform center, corners clamped then rounded outward."""
    h, w = dims
    ratio = rng.uniform()
    half_w = w * math.sqrt(ratio) / 2
    half_h = h * math.sqrt(ratio) / 2
    cx = rng.uniform(0.0, w)
    cy = rng.uniform(0.0, h)
    return WindowSpec(
        x0=math.floor(min(max(cx - half_w, 0), w)),
        y0=math.floor(min(max(cy - half_h, 0), h)),
        x1=math.ceil(min(max(cx + half_w, 0), w)),
        y1=math.ceil(min(max(cy + half_h, 0), h)),
    )


def sample_window(rng: Rng, dims: Tuple[int, int], tau: float) -> WindowSpec:
    """
    Rejection-sample a window covering at least tau * H * W pixels.

    Each attempt draws a ratio r ~ U(0, 1), sizes the window to
    (H * sqrt(r), W * sqrt(r)), drops its center uniformly on the plane,
    clamps the corners into [0, W] x [0, H] and rounds them outward to the
    pixel grid. Any plane can be covered in full, so every tau has a
    positive acceptance probability.

    Args:
        rng: Window stream
        dims: (H, W) of the feature plane
        tau: Minimum area ratio in (0, 1]

    Returns:
        Accepted WindowSpec; the full plane after MAX_WINDOW_TRIES rejections
    """
    _check_tau(tau)
    h, w = dims
    if h * w == 0:
        raise DegenerateInputError(f"Cannot place a window on a {dims} plane")
    if tau >= 1.0:
        return full_window(dims)
    threshold = tau * h * w
    for _ in range(MAX_WINDOW_TRIES):
        spec = _window_attempt(rng, dims)
        if spec.area >= threshold and spec.x1 > spec.x0 and spec.y1 > spec.y0:
            return spec
    return full_window(dims)


def max_strict_window_area(dims: Tuple[int, int]) -> int:
    """Largest rectangle that still leaves at least one pixel of the plane uncovered."""
    h, w = dims
    return h * w - min(h, w)


_warned: Set[Tuple] = set()


def _warn_once(key: Tuple, message: str):
    if key not in _warned:
        _warned.add(key)
        logger.warning(message)


def sample_erased_window(rng: Rng, dims: Tuple[int, int], tau: float) -> Optional[WindowSpec]:
    """
    Rectangle to erase for the Mask strategy: area >= (1 - tau) * H * W, never the whole plane.

    Returns:
        WindowSpec, or None when no strict sub-rectangle can meet the bound
        (the caller falls back to the full plane)
    """
    h, w = dims
    threshold = (1.0 - tau) * h * w
    if threshold > max_strict_window_area(dims):
        _warn_once(("Mask", tuple(dims), tau),
                   f"Mask with tau={tau} cannot erase a strict sub-rectangle of a {dims} plane; using the full plane")
        return None
    for _ in range(MAX_WINDOW_TRIES):
        spec = _window_attempt(rng, dims)
        if threshold <= spec.area < h * w and spec.x1 > spec.x0 and spec.y1 > spec.y0:
            return spec
    return None


def block_draw_count(block_count: int, tau: float) -> int:
    return max(1, math.floor(tau * block_count + _FLOOR_SLACK))


def sample_blocks(rng: Rng, partition: BlockPartition, tau: float) -> Tuple[int, ...]:
    """Draw max(1, floor(tau * B)) distinct block indices uniformly without replacement."""
    _check_tau(tau)
    count = block_draw_count(partition.block_count, tau)
    picked = rng.choice(partition.block_count, count, replace=False)
    return tuple(sorted(int(i) for i in picked))


@dataclass(frozen=True)
class RegionDraw:
    """One sampled region, in a form that can be cached and replayed."""

    strategy: str
    dims: Tuple[int, int]
    window: Optional[WindowSpec] = None
    blocks: Optional[Tuple[int, ...]] = None
    pixels: Optional[Tuple[int, ...]] = None  # flat indices of kept pixels
    partition: Optional[BlockPartition] = field(default=None, compare=False)

    def to_mask(self) -> np.ndarray:
        if self.strategy == "Global":
            return np.ones(self.dims, dtype=bool)
        if self.strategy == "Window":
            return self.window.to_mask(self.dims)
        if self.strategy == "Mask":
            return ~self.window.to_mask(self.dims)
        if self.strategy == "Block":
            return self.partition.blocks_to_mask(self.blocks)
        if self.strategy == "Pixel":
            mask = np.zeros(self.dims[0] * self.dims[1], dtype=bool)
            mask[list(self.pixels)] = True
            return mask.reshape(self.dims)
        raise ConfigError(f"Unknown region strategy: {self.strategy}")

    def to_record(self) -> Dict:
        record: Dict = {"strategy": self.strategy, "dims": list(self.dims)}
        if self.window is not None:
            record["window"] = self.window.to_dict()
        if self.blocks is not None:
            record["blocks"] = list(self.blocks)
        if self.pixels is not None:
            record["pixels"] = list(self.pixels)
        return record


def draw_region(
    strategy: str,
    rng: Rng,
    dims: Tuple[int, int],
    tau: float,
    partition: Optional[BlockPartition] = None,
) -> RegionDraw:
    """Sample one region for `strategy` without materializing the mask."""
    _check_tau(tau)
    if strategy == "Global":
        return RegionDraw("Global", dims)
    if strategy == "Window":
        return RegionDraw("Window", dims, window=sample_window(rng, dims, tau))
    if strategy == "Block":
        if partition is None:
            raise ConfigError("Block strategy needs a BlockPartition")
        return RegionDraw("Block", dims, blocks=sample_blocks(rng, partition, tau), partition=partition)
    if strategy == "Pixel":
        for _ in range(MAX_WINDOW_TRIES):
            keep = rng.bernoulli(tau, dims[0] * dims[1])
            if keep.any():
                return RegionDraw("Pixel", dims, pixels=tuple(int(i) for i in np.flatnonzero(keep)))
        return RegionDraw("Global", dims)
    if strategy == "Mask":
        if tau >= 1.0:
            return RegionDraw("Global", dims)
        erased = sample_erased_window(rng, dims, tau)
        if erased is None:
            return RegionDraw("Global", dims)
        return RegionDraw("Mask", dims, window=erased)
    raise ConfigError(f"Unknown region strategy: {strategy}")


def region_for_strategy(
    strategy: str,
    rng: Rng,
    dims: Tuple[int, int],
    tau: float,
    partition: Optional[BlockPartition] = None,
) -> np.ndarray:
    """
    Boolean H x W mask of the pixels contributing to local statistics.

    Args:
        strategy: Global, Window, Block, Pixel or Mask
        rng: Window stream
        dims: (H, W)
        tau: Kept-area ratio
        partition: Required for Block

    Returns:
        Non-empty boolean mask
    """
    return draw_region(strategy, rng, dims, tau, partition).to_mask()


def rescale_draw(draw: RegionDraw, dims: Tuple[int, int], partition: Optional[BlockPartition]) -> RegionDraw:
    """Carry a draw made at one resolution over to another layer."""
    if draw.dims == tuple(dims) and draw.partition == partition:
        return draw
    if draw.strategy in ("Window", "Mask"):
        window = draw.window.rescale(draw.dims, dims)
        if draw.strategy == "Mask" and window.area >= dims[0] * dims[1]:
            return RegionDraw("Global", tuple(dims))
        return RegionDraw(draw.strategy, tuple(dims), window=window)
    if draw.strategy == "Block":
        return RegionDraw("Block", tuple(dims), blocks=draw.blocks, partition=partition)
    return RegionDraw("Global", tuple(dims))


@dataclass
class LayerSite:
    """Where one WIN layer samples: its id, feature dims and block partition."""

    layer_id: str
    dims: Tuple[int, int]
    partition: Optional[BlockPartition] = None


class OnlineRegionSource:
    """Draws regions on the fly from the window stream, in call order."""

    def __init__(
        self,
        rng: Rng,
        strategy: str,
        tau: float,
        share_across_layers: bool = False,
    ):
        """
        Initialize the source.

        Args:
            rng: Window stream (consumed in step-major, layer-minor order)
            strategy: Region strategy name
            tau: Kept-area ratio
            share_across_layers: Reuse the first layer's draw for all layers of a step
        """
        if strategy not in STRATEGIES:
            raise ConfigError(f"Unknown region strategy: {strategy}")
        _check_tau(tau)
        self.rng = rng
        self.strategy = strategy
        self.tau = tau
        self.share_across_layers = share_across_layers
        self._shared: Dict[int, RegionDraw] = {}

    def draw(self, layer_id: str, step: int, dims: Tuple[int, int],
             partition: Optional[BlockPartition] = None) -> RegionDraw:
        if self.share_across_layers and self.strategy != "Pixel":
            if step not in self._shared:
                self._shared = {step: draw_region(self.strategy, self.rng, dims, self.tau, partition)}
            return rescale_draw(self._shared[step], dims, partition)
        return draw_region(self.strategy, self.rng, dims, self.tau, partition)

    def region(self, layer_id: str, step: int, dims: Tuple[int, int],
               partition: Optional[BlockPartition] = None) -> np.ndarray:
        return self.draw(layer_id, step, dims, partition).to_mask()


def sample_schedule(
    rng: Rng,
    steps: int,
    layers: List[LayerSite],
    tau: float,
    strategy: str,
    share_across_layers: bool = False,
    start_step: int = 0,
) -> List[Tuple[str, int, RegionDraw]]:
    """Draw every (step, layer) region in the order an online run would."""
    source = OnlineRegionSource(rng, strategy, tau, share_across_layers)
    draws = []
    for step in range(start_step, start_step + steps):
        for site in layers:
            draws.append((site.layer_id, step, source.draw(site.layer_id, step, site.dims, site.partition)))
    return draws
