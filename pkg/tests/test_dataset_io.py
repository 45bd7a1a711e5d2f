"""Unit tests for dataset directories."""

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

from src.core.corruptions import SEVERITY_TABLES, read_corruption_table
from src.core.data_synth import gen_benchmark
from src.core.dataset_io import (
    CORRUPTIONS_NAME,
    MANIFEST_NAME,
    DataConfig,
    DatasetReader,
    load_train_data,
    read_dataset,
    write_dataset,
)
from src.core.exceptions import IntegrityError


@pytest.fixture(scope="module")
def benchmark():
    """Two sites, 100 training samples each."""
    return gen_benchmark(8, sites=("A", "B"), n_per_class=25, test_per_class=5)


class TestDatasetIO:
    """Test suite for DatasetWriter / DatasetReader."""

    @pytest.fixture
    def data_dir(self):
        """Create a temporary dataset directory."""
        temp_dir = tempfile.mkdtemp()
        yield Path(temp_dir)
        shutil.rmtree(temp_dir)

    def test_round_trip_is_bit_exact(self, benchmark, data_dir):
        write_dataset(data_dir, benchmark, seed=8)
        loaded, manifest = read_dataset(data_dir)
        assert manifest["seed"] == 8
        assert set(loaded) == {"A", "B"}
        for site in benchmark:
            for split in ("train", "test"):
                np.testing.assert_array_equal(loaded[site][split].images, benchmark[site][split].images)
                np.testing.assert_array_equal(loaded[site][split].labels, benchmark[site][split].labels)
        assert len(loaded["A"]["train"]) == 100

    def test_layout(self, benchmark, data_dir):
        write_dataset(data_dir, benchmark, seed=8)
        manifest = json.loads((data_dir / MANIFEST_NAME).read_text())
        assert manifest["classes"] == ["disk", "square", "triangle", "cross"]
        assert manifest["sites"]["B"]["style"]["name"] == "B"
        labels = pd.read_csv(data_dir / "A_train.csv")
        assert list(labels.columns) == ["index", "label", "class"]
        assert read_corruption_table(data_dir / CORRUPTIONS_NAME) == SEVERITY_TABLES

    def test_size_accounting(self, benchmark, data_dir):
        write_dataset(data_dir, benchmark, seed=8)
        size = (data_dir / "A_train.wt4").stat().st_size
        assert size == 20 + 100 * 3 * 32 * 32 * 4

    def test_missing_tensor_file(self, benchmark, data_dir):
        write_dataset(data_dir, benchmark, seed=8)
        (data_dir / "B_test.wt4").unlink()
        with pytest.raises(IntegrityError):
            read_dataset(data_dir)

    def test_label_tampering(self, benchmark, data_dir):
        write_dataset(data_dir, benchmark, seed=8)
        path = data_dir / "A_test.csv"
        path.write_text(path.read_text().replace(",0,disk", ",1,disk", 1))
        with pytest.raises(IntegrityError):
            DatasetReader(data_dir).read_split("A", "test")

    def test_missing_manifest(self, data_dir):
        with pytest.raises(IntegrityError):
            DatasetReader(data_dir)

    def test_malformed_manifest(self, data_dir):
        (data_dir / MANIFEST_NAME).write_text("{not json")
        with pytest.raises(IntegrityError):
            DatasetReader(data_dir)

    def test_wrong_version(self, benchmark, data_dir):
        write_dataset(data_dir, benchmark, seed=8)
        manifest = json.loads((data_dir / MANIFEST_NAME).read_text())
        manifest["format_version"] = 99
        (data_dir / MANIFEST_NAME).write_text(json.dumps(manifest))
        with pytest.raises(IntegrityError):
            DatasetReader(data_dir)

    def test_unknown_split(self, benchmark, data_dir):
        write_dataset(data_dir, benchmark, seed=8)
        with pytest.raises(IntegrityError):
            DatasetReader(data_dir).read_split("C", "train")

    def test_load_train_data(self, benchmark, data_dir):
        write_dataset(data_dir, benchmark, seed=8)
        data, classes = load_train_data(DataConfig(data_dir=str(data_dir)))
        assert len(classes) == 4
        assert len(data.train) == 100 and len(data.val) == 20
        assert list(data.ood) == ["B"]
        assert set(data.eval_splits()) == {"val", "B"}

    def test_merged_train_sites(self, benchmark, data_dir):
        write_dataset(data_dir, benchmark, seed=8)
        data, _ = load_train_data(DataConfig(data_dir=str(data_dir), train_sites=["A", "B"]))
        assert len(data.train) == 200
        assert data.ood == {}

    def test_missing_train_site(self, benchmark, data_dir):
        write_dataset(data_dir, benchmark, seed=8)
        with pytest.raises(IntegrityError):
            load_train_data(DataConfig(data_dir=str(data_dir), train_sites=["E"]))
