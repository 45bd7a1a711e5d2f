"""Procedural image corruptions with five severity levels each."""

import json
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field
from scipy.ndimage import uniform_filter

from src.core.data_synth import Split
from src.core.exceptions import IntegrityError
from src.core.rng import Rng
from src.utils.logger import logger

CorruptionKind = Literal["gaussian_noise", "box_blur", "contrast", "brightness", "pixelate"]

SEVERITY_TABLES: Dict[str, List[float]] = {
    "gaussian_noise": [0.04, 0.08, 0.12, 0.16, 0.20],  # noise sigma
    "box_blur": [2, 3, 4, 5, 6],                      # kernel side
    "contrast": [0.75, 0.6, 0.45, 0.3, 0.15],         # multiplier around the channel mean
    "brightness": [0.1, 0.2, 0.3, 0.4, 0.5],          # additive shift
    "pixelate": [0.9, 0.75, 0.6, 0.45, 0.3],          # downscale factor
}
KINDS = tuple(SEVERITY_TABLES)


class CorruptionSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: CorruptionKind
    severity: int = Field(ge=1, le=5)

    def parameter(self, tables: Optional[Mapping[str, Sequence[float]]] = None) -> float:
        tables = tables or SEVERITY_TABLES
        return tables[self.kind][self.severity - 1]


def _gaussian_noise(image: np.ndarray, sigma: float, rng: Optional[Rng]) -> np.ndarray:
    if rng is None:
        raise ValueError("gaussian_noise needs a random stream")
    return image + rng.normal(0.0, sigma, image.shape)


def _box_blur(image: np.ndarray, size: float) -> np.ndarray:
    size = int(size)
    if size <= 1:
        return image.copy()
    footprint = (1,) * (image.ndim - 2) + (size, size)
    return uniform_filter(image, size=footprint, mode="reflect")


def _contrast(image: np.ndarray, factor: float) -> np.ndarray:
    mean = image.mean(axis=(-2, -1), keepdims=True)
    return mean + factor * (image - mean)


def _pixelate(image: np.ndarray, factor: float) -> np.ndarray:
    h, w = image.shape[-2:]
    small = (max(1, int(round(w * factor))), max(1, int(round(h * factor))))
    planes = image.reshape(-1, h, w)
    out = np.empty_like(planes)
    for i, plane in enumerate(planes):
        img = Image.fromarray(np.ascontiguousarray(plane, dtype=np.float32))
        out[i] = np.asarray(img.resize(small, Image.BOX).resize((w, h), Image.NEAREST))
    return out.reshape(image.shape)


def apply_corruption(image: np.ndarray, kind: str, parameter: float, rng: Optional[Rng] = None) -> np.ndarray:
    """
    Apply one corruption with an explicit parameter; output clamped to [0, 1].

    Args:
        image: C x H x W or N x C x H x W array in [0, 1]
        kind: Corruption kind
        parameter: Severity parameter (sigma, kernel size, multiplier, shift or factor)
        rng: Noise stream (gaussian_noise only)

    Returns:
        Corrupted float32 array of the same shape
    """
    image = np.asarray(image, dtype=np.float64)
    if kind == "gaussian_noise":
        out = _gaussian_noise(image, parameter, rng)
    elif kind == "box_blur":
        out = _box_blur(image, parameter)
    elif kind == "contrast":
        out = _contrast(image, parameter)
    elif kind == "brightness":
        out = image + parameter
    elif kind == "pixelate":
        out = _pixelate(image, parameter)
    else:
        raise ValueError(f"Unknown corruption kind: {kind}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def corrupt(image: np.ndarray, spec: CorruptionSpec, rng: Optional[Rng] = None,
            tables: Optional[Mapping[str, Sequence[float]]] = None) -> np.ndarray:
    return apply_corruption(image, spec.kind, spec.parameter(tables), rng)


def corruption_grid(kinds: Sequence[str] = KINDS) -> List[CorruptionSpec]:
    """Every (kind, severity) pair, kind-major."""
    return [CorruptionSpec(kind=kind, severity=s) for kind in kinds for s in range(1, 6)]


def corrupt_split(split: Split, spec: CorruptionSpec, rng: Rng,
                  tables: Optional[Mapping[str, Sequence[float]]] = None) -> Split:
    stream = rng.stream(spec.kind, spec.severity)
    images = corrupt(split.images, spec, stream, tables)
    return Split(f"{split.name}:{spec.kind}:{spec.severity}", images, split.labels, split.site, split.classes)


def write_corruption_table(path: Union[str, Path], tables: Optional[Mapping[str, Sequence[float]]] = None):
    with open(path, "w") as f:
        json.dump({k: list(v) for k, v in (tables or SEVERITY_TABLES).items()}, f, indent=2)
    logger.debug(f"Wrote corruption severity tables to {path}")


def read_corruption_table(path: Union[str, Path]) -> Dict[str, List[float]]:
    """Load severity tables; a missing file falls back to the built-in tables."""
    path = Path(path)
    if not path.exists():
        return dict(SEVERITY_TABLES)
    with open(path, "r") as f:
        tables = json.load(f)
    for kind, values in tables.items():
        if kind not in SEVERITY_TABLES or len(values) != 5:
            raise IntegrityError(f"Malformed severity table entry for {kind!r}")
    return tables
