"""
Desk-scale experiments on the ShapeSites benchmark.

These train many small CNNs and take tens of minutes; they only run with
WINNORM_RUN_SLOW=1. WINNORM_SLOW_SEEDS changes the number of seeds (default 5).
"""

import pytest
import json
import numpy as np
import pandas as pd
import tempfile
from pathlib import Path
import shutil
import sys
import os

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.cli.commands import main, run_cell
from src.core.data_synth import SITES, Split, TrainData, gen_benchmark, nearest_centroid_gap
from src.core.dataset_io import write_dataset
from src.core.model import CnnSpec, build_model
from src.core.normalization import NormConfig
from src.core.training import TrainConfig, evaluate, train

pytestmark = pytest.mark.skipif(
    os.environ.get("WINNORM_RUN_SLOW") != "1", reason="set WINNORM_RUN_SLOW=1 to run desk-scale experiments"
)

SEEDS = int(os.environ.get("WINNORM_SLOW_SEEDS", "5"))
BASE = {
    "channels": [16, 32, 64],
    "convs_per_stage": 1,
    "train": {"epochs": 8, "batch_size": 32, "warmup_epochs": 1, "base_lr": 0.05},
}


@pytest.fixture(scope="module")
def workspace():
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    shutil.rmtree(temp_dir)


@pytest.fixture(scope="module")
def shapesites(workspace):
    """Five sites, 100 training images per class."""
    out = workspace / "shapesites"
    write_dataset(out, gen_benchmark(0, tuple(SITES), n_per_class=100, test_per_class=25), seed=0)
    return out


@pytest.fixture(scope="module")
def grid(workspace, shapesites):
    """Long-form metrics for BN / IN / WIN / WIN-WIN over SEEDS seeds, trained on site A."""
    base = dict(BASE, data={"data_dir": str(shapesites), "train_sites": ["A"]})
    rows = []
    for method in ("BN", "IN", "WIN", "WIN-WIN"):
        for seed in range(SEEDS):
            result = run_cell(base, method, seed, str(workspace / "grid"), corruptions=True)
            assert result["ok"], result.get("error")
            rows.extend(result["rows"])
    return pd.DataFrame(rows)


def mean_value(frame, method, metric, dataset="all"):
    cells = frame[(frame["method"] == method) & (frame["metric"] == metric) & (frame["dataset"] == dataset)]
    assert len(cells) == SEEDS
    return float(cells["value"].mean())


def toy_split(name, n, seed):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.normal(0.0, 0.05, size=(n, 3, 8, 8)) + 0.2
    images[labels == 0, :, :, :4] += 0.6
    images[labels == 1, :, :, 4:] += 0.6
    return Split(name, images, labels, site=name, classes=("left", "right"))


class TestSanity:
    """Oracles that check the benchmark and the trainer before comparing methods."""

    def test_nearest_centroid_gap(self):
        benchmark = gen_benchmark(0, ("A", "B"), n_per_class=100, test_per_class=50)
        ind, ood, gap = nearest_centroid_gap(benchmark["A"]["train"], benchmark["A"]["test"], benchmark["B"]["test"])
        assert ind > ood
        assert gap == pytest.approx(ind - ood)

    @pytest.mark.parametrize("kind", ["BN", "IN", "WIN"])
    def test_separable_toy_set(self, kind):
        data = TrainData(train=toy_split("train", 64, 0), val=toy_split("val", 32, 1))
        spec = CnnSpec.default(norm=NormConfig(kind=kind), channels=(8, 16), num_classes=2,
                               init_seed=0, input_dims=(3, 8, 8), convs_per_stage=1)
        config = TrainConfig(epochs=20, batch_size=16, base_lr=0.05, warmup_epochs=1, augment=False)
        model, _ = train(build_model(spec), data, config)
        assert evaluate(model, data.train)["accuracy"] >= 0.99


class TestShapeSites:
    """Directional comparisons between normalization methods."""

    def test_win_beats_bn_out_of_distribution(self, grid):
        win = mean_value(grid, "WIN", "accuracy_ood_mean")
        bn = mean_value(grid, "BN", "accuracy_ood_mean")
        assert win - bn >= 0.03

    def test_win_win_keeps_up_with_win(self, grid):
        win = mean_value(grid, "WIN", "accuracy_ood_mean")
        win_win = mean_value(grid, "WIN-WIN", "accuracy_ood_mean")
        assert win_win >= win - 0.005
        assert win_win >= win

    def test_in_distribution_is_neutral(self, grid):
        win = mean_value(grid, "WIN", "accuracy", "val")
        bn = mean_value(grid, "BN", "accuracy", "val")
        assert abs(win - bn) <= 0.03

    def test_corruption_error_direction(self, grid):
        assert mean_value(grid, "WIN", "mean_corruption_error") < mean_value(grid, "BN", "mean_corruption_error")


class TestRelativeAuc:
    """m-cAUC against a reference model trained on every site."""

    @pytest.fixture(scope="class")
    def binary_data(self, workspace):
        out = workspace / "binary"
        assert main(["gen-data", "--out", str(out), "--seed", "1", "--binary",
                     "--n-per-class", "100", "--test-per-class", "25"]) == 0
        return out

    def _train(self, workspace, data, name, sites):
        out = workspace / name
        overrides = [f"data.data_dir={data}", f"data.train_sites={json.dumps(sites)}", f"run_id={name}",
                     "channels=[16,32,64]", "convs_per_stage=1", "train.epochs=8", "train.base_lr=0.05"]
        assert main(["train", "--out", str(out), "--override"] + overrides) == 0
        return out / "checkpoint"

    def _eval(self, checkpoint, data, out, reference=None):
        argv = ["eval", "--checkpoint", str(checkpoint), "--data", str(data), "--splits", "B,C,D,E", "--out", str(out)]
        if reference:
            argv += ["--reference", str(reference)]
        assert main(argv) == 0
        summary = json.loads((out / "summary.json").read_text())
        return {m["name"]: m["value"] for m in summary["metrics"]}

    def test_reference_against_itself(self, workspace, binary_data):
        checkpoint = self._train(workspace, binary_data, "merged", list(SITES))
        self._eval(checkpoint, binary_data, workspace / "merged-eval")
        metrics = self._eval(checkpoint, binary_data, workspace / "merged-self",
                             workspace / "merged-eval" / "summary.json")
        assert metrics["m_cauc"] == pytest.approx(1.0, abs=1e-12)

    def test_single_site_model(self, workspace, binary_data):
        reference = workspace / "merged-eval" / "summary.json"
        if not reference.exists():
            self._eval(self._train(workspace, binary_data, "merged", list(SITES)), binary_data,
                       workspace / "merged-eval")
        checkpoint = self._train(workspace, binary_data, "site-a", ["A"])
        metrics = self._eval(checkpoint, binary_data, workspace / "site-a-eval", reference)
        assert 0.0 < metrics["m_cauc"] <= 1.02


class TestWindowCacheSpeed:
    """Replaying a cached epoch is faster than sampling online."""

    def test_offline_is_faster(self, workspace):
        out = workspace / "bench"
        assert main(["bench-windows", "--steps", "32", "--repeats", "5", "--batch-size", "16", "--out", str(out)]) == 0
        report = json.loads((out / "bench.json").read_text())
        assert report["offline"]["median_epoch_seconds"] < report["online"]["median_epoch_seconds"]
