"""Unit tests for the offline window cache."""

import pytest
import json
import numpy as np
import tempfile
from pathlib import Path
import shutil
import sys
import os

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.core.exceptions import IntegrityError
from src.core.rng import Rng
from src.core.window_cache import WindowCache, cache_epoch, replay
from src.core.window_sampling import LayerSite, OnlineRegionSource, RegionDraw, partition_blocks


class TestWindowCache:
    """Test suite for WindowCache and cache_epoch."""

    @pytest.fixture
    def temp_cache_dir(self):
        """Create a temporary directory for cache files."""
        temp_dir = tempfile.mkdtemp()
        yield temp_dir
        shutil.rmtree(temp_dir)

    @pytest.fixture
    def layers(self):
        """Three WIN layers at decreasing resolution."""
        return [
            LayerSite("stage0.norm0", (32, 32)),
            LayerSite("stage1.norm0", (16, 16)),
            LayerSite("stage2.norm0", (8, 8)),
        ]

    def online_draws(self, seed, steps, layers, strategy="Window", tau=0.7, share=False):
        source = OnlineRegionSource(Rng(seed).stream("window"), strategy, tau, share)
        return {
            (site.layer_id, step): source.draw(site.layer_id, step, site.dims, site.partition)
            for step in range(steps)
            for site in layers
        }

    def test_step_zero_matches_online(self, layers):
        """Replaying step 0 gives the online draw for the same seed."""
        cache = cache_epoch(Rng(42).stream("window"), 1, layers, 0.7, "Window")
        online = self.online_draws(42, 1, layers)
        for site in layers:
            assert replay(cache, site.layer_id, 0) == online[(site.layer_id, 0)]

    @pytest.mark.parametrize("strategy", ["Window", "Mask", "Pixel"])
    def test_full_epoch_equality(self, layers, strategy):
        """Every (layer, step) of a 100-step epoch replays identically."""
        cache = cache_epoch(Rng(7).stream("window"), 100, layers, 0.7, strategy)
        online = self.online_draws(7, 100, layers, strategy)
        assert len(cache) == 300
        for (layer_id, step), draw in online.items():
            assert cache.replay(layer_id, step) == draw
            np.testing.assert_array_equal(cache.region(layer_id, step, draw.dims), draw.to_mask())

    def test_shared_layers_match_online(self, layers):
        cache = cache_epoch(Rng(9).stream("window"), 10, layers, 0.5, "Window", share_across_layers=True)
        online = self.online_draws(9, 10, layers, tau=0.5, share=True)
        for (layer_id, step), draw in online.items():
            assert cache.replay(layer_id, step) == draw

    def test_start_step_offsets_keys(self, layers):
        cache = cache_epoch(Rng(1).stream("window"), 5, layers, 0.7, "Window", start_step=20)
        cache.replay("stage0.norm0", 24)
        with pytest.raises(IntegrityError):
            cache.replay("stage0.norm0", 25)

    def test_past_end_is_integrity_error(self, layers):
        cache = cache_epoch(Rng(1).stream("window"), 3, layers, 0.7, "Window")
        with pytest.raises(IntegrityError):
            replay(cache, "stage0.norm0", 3)

    def test_sealed_cache_rejects_writes(self, layers):
        cache = cache_epoch(Rng(1).stream("window"), 1, layers, 0.7, "Window")
        with pytest.raises(IntegrityError):
            cache.add("stage0.norm0", 1, RegionDraw("Global", (32, 32)))

    def test_region_dims_checked(self, layers):
        cache = cache_epoch(Rng(1).stream("window"), 1, layers, 0.7, "Window")
        with pytest.raises(IntegrityError):
            cache.region("stage0.norm0", 0, (16, 16))

    def test_jsonl_round_trip(self, layers, temp_cache_dir):
        """Saved caches reload with the same draws and digest."""
        cache = cache_epoch(Rng(5).stream("window"), 4, layers, 0.7, "Mask")
        path = Path(temp_cache_dir) / "windows.jsonl"
        cache.save_jsonl(path)

        with open(path) as f:
            header = json.loads(f.readline())
        assert header == {"strategy": "Mask", "tau": 0.7}

        loaded = WindowCache.load_jsonl(path)
        assert len(loaded) == len(cache)
        assert loaded.digest() == cache.digest()

    def test_block_draws_reload_with_partitions(self, temp_cache_dir):
        partition = partition_blocks((32, 32), (8, 8), (32, 32))
        layers = [LayerSite("stage0.norm0", (32, 32), partition)]
        cache = cache_epoch(Rng(2).stream("window"), 3, layers, 0.5, "Block")
        path = Path(temp_cache_dir) / "blocks.jsonl"
        cache.save_jsonl(path)

        loaded = WindowCache.load_jsonl(path, {"stage0.norm0": partition})
        for step in range(3):
            np.testing.assert_array_equal(
                loaded.region("stage0.norm0", step, (32, 32)),
                cache.region("stage0.norm0", step, (32, 32)),
            )
            assert loaded.region("stage0.norm0", step, (32, 32)).sum() == 8 * 64

    def test_missing_and_malformed_files(self, temp_cache_dir):
        with pytest.raises(IntegrityError):
            WindowCache.load_jsonl(Path(temp_cache_dir) / "absent.jsonl")
        bad = Path(temp_cache_dir) / "bad.jsonl"
        bad.write_text('{"strategy": "Window"}\n')
        with pytest.raises(IntegrityError):
            WindowCache.load_jsonl(bad)

    def test_digest_depends_on_seed(self, layers):
        a = cache_epoch(Rng(1).stream("window"), 2, layers, 0.7, "Window")
        b = cache_epoch(Rng(2).stream("window"), 2, layers, 0.7, "Window")
        assert a.digest() != b.digest()
