"""On-disk layout of the shape benchmark.

    manifest.json            sites, classes, counts, seed, styles, checksums
    <site>_<split>.wt4       N x 3 x H x W float32 images
    <site>_<split>.csv       labels
    corruptions.json         corruption severity tables
"""

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from src.core.corruptions import write_corruption_table
from src.core.data_synth import CLASSES, SITES, Split, TrainData
from src.core.exceptions import IntegrityError
from src.core.tensor_io import read_wt4, write_wt4
from src.utils.logger import logger

MANIFEST_NAME = "manifest.json"
CORRUPTIONS_NAME = "corruptions.json"
FORMAT_VERSION = 1

Benchmark = Dict[str, Dict[str, Split]]


class DataConfig(BaseModel):
    """Which dataset to read and how to split it into train / IND / OOD."""

    model_config = ConfigDict(extra="forbid")

    data_dir: str = "./data/shapesites"
    train_sites: List[str] = Field(default_factory=lambda: ["A"], min_length=1)
    ood_sites: Optional[List[str]] = None  # None: every site not trained on


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class DatasetWriter:
    """Write a generated benchmark into a directory with a checksummed manifest."""

    def __init__(self, directory: Union[str, Path]):
        self.logger = logger
        self.directory = Path(directory)

    def write(self, benchmark: Benchmark, seed: int, binary: bool = False) -> Path:
        """
        Write every split plus the manifest.

        Args:
            benchmark: {site: {split: Split}}
            seed: Master seed the data was generated from
            binary: Whether this is the two-class variant

        Returns:
            Path of the manifest
        """
        self.directory.mkdir(parents=True, exist_ok=True)
        classes = next(iter(next(iter(benchmark.values())).values())).classes if benchmark else CLASSES
        sites = {}
        for site, splits in benchmark.items():
            entries = {}
            for split_name, split in splits.items():
                stem = f"{site}_{split_name}"
                images_digest = write_wt4(self.directory / f"{stem}.wt4", split.images)
                labels = pd.DataFrame({
                    "index": range(len(split)),
                    "label": split.labels,
                    "class": [split.classes[i] for i in split.labels],
                })
                labels.to_csv(self.directory / f"{stem}.csv", index=False)
                entries[split_name] = {
                    "count": len(split),
                    "images": f"{stem}.wt4",
                    "labels": f"{stem}.csv",
                    "sha256": {
                        "images": images_digest,
                        "labels": _sha256(self.directory / f"{stem}.csv"),
                    },
                }
            style = SITES[site].model_dump(mode="json") if site in SITES else {}
            sites[site] = {"style": style, "splits": entries}

        manifest = {
            "format_version": FORMAT_VERSION,
            "seed": seed,
            "binary": binary,
            "classes": list(classes),
            "sites": sites,
        }
        write_corruption_table(self.directory / CORRUPTIONS_NAME)
        path = self.directory / MANIFEST_NAME
        with open(path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        self.logger.info(f"Wrote {len(sites)} sites to {self.directory}")
        return path


class DatasetReader:
    """Read and verify a benchmark directory."""

    def __init__(self, directory: Union[str, Path]):
        self.logger = logger
        self.directory = Path(directory)
        self.manifest = self._load_manifest()
        self.classes: Tuple[str, ...] = tuple(self.manifest["classes"])

    def _load_manifest(self) -> Dict:
        path = self.directory / MANIFEST_NAME
        if not path.exists():
            raise IntegrityError(f"No dataset manifest in {self.directory}")
        try:
            with open(path, "r") as f:
                manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise IntegrityError(f"Malformed manifest {path}: {e}")
        for key in ("format_version", "classes", "sites"):
            if key not in manifest:
                raise IntegrityError(f"Manifest {path} lacks {key!r}")
        if manifest["format_version"] != FORMAT_VERSION:
            raise IntegrityError(f"Unsupported dataset format version {manifest['format_version']}")
        return manifest

    @property
    def sites(self) -> List[str]:
        return list(self.manifest["sites"])

    def read_split(self, site: str, split_name: str) -> Split:
        """
        Load one split, verifying checksums, count and label range.

        Raises:
            IntegrityError: Missing site/split/file, checksum or shape mismatch
        """
        try:
            entry = self.manifest["sites"][site]["splits"][split_name]
            images_file, labels_file = entry["images"], entry["labels"]
            digests, count = entry["sha256"], int(entry["count"])
        except (KeyError, TypeError, ValueError):
            raise IntegrityError(f"Dataset has no valid entry for site {site!r} split {split_name!r}")

        labels_path = self.directory / labels_file
        if not labels_path.exists():
            raise IntegrityError(f"Label file not found: {labels_path}")
        if _sha256(labels_path) != digests.get("labels"):
            raise IntegrityError(f"Checksum mismatch for {labels_path}")
        images = read_wt4(self.directory / images_file, digests.get("images"))
        labels = pd.read_csv(labels_path)["label"].to_numpy()

        if images.shape[0] != count or len(labels) != count:
            raise IntegrityError(f"{site}/{split_name}: manifest count {count}, found {images.shape[0]} images")
        if images.shape[1] != 3:
            raise IntegrityError(f"{site}/{split_name}: expected 3 channels, got {images.shape[1]}")
        if len(labels) and (labels.min() < 0 or labels.max() >= len(self.classes)):
            raise IntegrityError(f"{site}/{split_name}: labels out of range")
        return Split(split_name, images, labels, site, self.classes)

    def read_all(self) -> Benchmark:
        return {
            site: {name: self.read_split(site, name) for name in self.manifest["sites"][site]["splits"]}
            for site in self.sites
        }


def write_dataset(directory: Union[str, Path], benchmark: Benchmark, seed: int, binary: bool = False) -> Path:
    return DatasetWriter(directory).write(benchmark, seed, binary)


def read_dataset(directory: Union[str, Path]) -> Tuple[Benchmark, Dict]:
    reader = DatasetReader(directory)
    return reader.read_all(), reader.manifest


def load_train_data(config: DataConfig) -> Tuple[TrainData, Tuple[str, ...]]:
    """
    Assemble train / IND-validation / OOD splits from a dataset directory.

    Several train sites are concatenated (merged-sites reference training).

    Returns:
        (TrainData, class names)
    """
    reader = DatasetReader(config.data_dir)
    missing = [s for s in config.train_sites if s not in reader.sites]
    if missing:
        raise IntegrityError(f"Train sites {missing} not present in {config.data_dir}")
    ood_sites = config.ood_sites
    if ood_sites is None:
        ood_sites = [s for s in reader.sites if s not in config.train_sites]

    train = Split.concat("train", [reader.read_split(s, "train") for s in config.train_sites])
    val = Split.concat("val", [reader.read_split(s, "test") for s in config.train_sites])
    ood = {site: reader.read_split(site, "test") for site in ood_sites}
    return TrainData(train=train, val=val, ood=ood), reader.classes
