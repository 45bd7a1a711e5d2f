"""Offline window-parameter cache.

Regions for a whole epoch are drawn up front, in exactly the order an
online run consumes the window stream, and replayed by (layer id, step).
Masks are materialized at build time so replay is a dictionary lookup.
"""

import hashlib
import json
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from src.core.exceptions import IntegrityError
from src.core.rng import Rng
from src.core.window_sampling import (
    BlockPartition,
    LayerSite,
    RegionDraw,
    WindowSpec,
    sample_schedule,
)
from src.utils.logger import logger


class WindowCache:
    """Write-once, read-many store of pre-drawn regions."""

    def __init__(self, strategy: str, tau: float):
        """
        Initialize an empty cache.

        Args:
            strategy: Region strategy the draws were made with
            tau: Kept-area ratio the draws were made with
        """
        self.logger = logger
        self.strategy = strategy
        self.tau = tau
        self._draws: Dict[Tuple[str, int], RegionDraw] = {}
        self._masks: Dict[Tuple[str, int], np.ndarray] = {}
        self._sealed = False

    def __len__(self) -> int:
        return len(self._draws)

    def __iter__(self) -> Iterator[Tuple[str, int, RegionDraw]]:
        for (layer_id, step), draw in self._draws.items():
            yield layer_id, step, draw

    def add(self, layer_id: str, step: int, draw: RegionDraw):
        if self._sealed:
            raise IntegrityError("WindowCache is sealed; build a new one per epoch")
        self._draws[(layer_id, step)] = draw

    def seal(self, materialize: bool = True):
        """Freeze the cache and precompute masks for replay."""
        if materialize:
            self._masks = {key: draw.to_mask() for key, draw in self._draws.items()}
        self._sealed = True

    def replay(self, layer_id: str, step: int) -> RegionDraw:
        """
        Return the draw recorded for (layer_id, step).

        Raises:
            IntegrityError: If the step lies past the end of the cache
        """
        try:
            return self._draws[(layer_id, step)]
        except KeyError:
            raise IntegrityError(f"Window cache has no entry for layer {layer_id!r} at step {step}")

    def region(self, layer_id: str, step: int, dims: Tuple[int, int],
               partition: Optional[BlockPartition] = None) -> np.ndarray:
        mask = self._masks.get((layer_id, step))
        if mask is None:
            mask = self.replay(layer_id, step).to_mask()
        if mask.shape != tuple(dims):
            raise IntegrityError(
                f"Cached region for {layer_id!r} has dims {mask.shape}, layer expects {tuple(dims)}"
            )
        return mask

    def digest(self) -> str:
        """Stable hash of the cached draws."""
        payload = json.dumps(
            [[layer_id, step, draw.to_record()] for layer_id, step, draw in self],
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def save_jsonl(self, path: Union[str, Path]):
        """Write one JSON record per (layer_id, step)."""
        path = Path(path)
        with open(path, "w") as f:
            f.write(json.dumps({"strategy": self.strategy, "tau": self.tau}) + "\n")
            for layer_id, step, draw in self:
                record = {"layer_id": layer_id, "step": step}
                record.update(draw.to_record())
                f.write(json.dumps(record) + "\n")
        self.logger.info(f"Saved window cache with {len(self)} entries to {path}")

    @classmethod
    def load_jsonl(cls, path: Union[str, Path],
                   partitions: Optional[Dict[str, BlockPartition]] = None) -> "WindowCache":
        """Read a cache written by save_jsonl; Block draws need their partitions."""
        path = Path(path)
        if not path.exists():
            raise IntegrityError(f"Window cache file not found: {path}")
        partitions = partitions or {}
        with open(path, "r") as f:
            lines = [line for line in f if line.strip()]
        try:
            header = json.loads(lines[0])
            cache = cls(header["strategy"], header["tau"])
            for line in lines[1:]:
                record = json.loads(line)
                window = WindowSpec(**record["window"]) if "window" in record else None
                draw = RegionDraw(
                    strategy=record["strategy"],
                    dims=tuple(record["dims"]),
                    window=window,
                    blocks=tuple(record["blocks"]) if "blocks" in record else None,
                    pixels=tuple(record["pixels"]) if "pixels" in record else None,
                    partition=partitions.get(record["layer_id"]),
                )
                cache.add(record["layer_id"], int(record["step"]), draw)
        except (IndexError, KeyError, TypeError, json.JSONDecodeError) as e:
            raise IntegrityError(f"Malformed window cache {path}: {e}")
        cache.seal()
        return cache


def cache_epoch(
    rng: Rng,
    steps: int,
    layers: List[LayerSite],
    tau: float,
    strategy: str,
    share_across_layers: bool = False,
    start_step: int = 0,
) -> WindowCache:
    """
    Pre-draw every region an epoch will use.

    Args:
        rng: Window stream, consumed exactly as an online run would
        steps: Steps in the epoch
        layers: WIN layers in forward order
        tau: Kept-area ratio
        strategy: Region strategy
        share_across_layers: Mirror of the online flag
        start_step: Global index of the epoch's first step

    Returns:
        Sealed WindowCache
    """
    cache = WindowCache(strategy, tau)
    for layer_id, step, draw in sample_schedule(
        rng, steps, layers, tau, strategy, share_across_layers, start_step
    ):
        cache.add(layer_id, step, draw)
    cache.seal()
    logger.debug(f"Cached {len(cache)} {strategy} regions for steps {start_step}..{start_step + steps - 1}")
    return cache


def replay(cache: WindowCache, layer_id: str, step: int) -> RegionDraw:
    return cache.replay(layer_id, step)
