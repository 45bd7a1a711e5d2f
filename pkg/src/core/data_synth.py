"""Multi-site procedural shape benchmark.

Every image holds one shape (disk, square, triangle or cross). Geometry is
rasterized first from its own random stream; a site style (background
texture, foreground intensity, contrast, noise, channel mixing) is applied
afterwards, so labels and geometry never depend on the site.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.core.rng import Rng
from src.utils.logger import logger

CLASSES: Tuple[str, ...] = ("disk", "square", "triangle", "cross")
BINARY_CLASSES: Tuple[str, ...] = ("disk", "square")
IMAGE_SIZE = 32
SUPERSAMPLE = 4


class SiteStyle(BaseModel):
    """Appearance of one acquisition site."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    background: float = Field(ge=0.0, le=1.0)
    texture_freq: float = Field(ge=0.0)
    texture_amp: float = Field(ge=0.0, le=1.0)
    fg_low: float = Field(ge=0.0, le=1.0)
    fg_high: float = Field(ge=0.0, le=1.0)
    contrast: float = Field(gt=0.0)
    noise_sigma: float = Field(ge=0.0)
    # Rows are output channels; columns weight (foreground, background, ambient)
    channel_mix: Tuple[Tuple[float, float, float], Tuple[float, float, float], Tuple[float, float, float]] = (
        (1.0, 1.0, 0.0),
        (1.0, 1.0, 0.0),
        (1.0, 1.0, 0.0),
    )

    @field_validator("channel_mix")
    @classmethod
    def _mix_in_unit_range(cls, value):
        if any(not 0.0 <= v <= 1.0 for row in value for v in row):
            raise ValueError("channel_mix entries must lie in [0, 1]")
        return value


SITES: Dict[str, SiteStyle] = {
    "A": SiteStyle(name="A", background=0.25, texture_freq=1.0, texture_amp=0.05,
                   fg_low=0.7, fg_high=0.9, contrast=1.0, noise_sigma=0.02),
    "B": SiteStyle(name="B", background=0.05, texture_freq=6.0, texture_amp=0.1,
                   fg_low=0.5, fg_high=0.7, contrast=0.8, noise_sigma=0.05,
                   channel_mix=((0.9, 0.3, 0.1), (0.5, 0.5, 0.1), (0.2, 0.6, 0.2))),
    "C": SiteStyle(name="C", background=0.75, texture_freq=2.0, texture_amp=0.15,
                   fg_low=0.1, fg_high=0.3, contrast=1.2, noise_sigma=0.03),
    "D": SiteStyle(name="D", background=0.45, texture_freq=4.0, texture_amp=0.05,
                   fg_low=0.55, fg_high=0.75, contrast=0.5, noise_sigma=0.08,
                   channel_mix=((0.2, 0.4, 0.1), (0.6, 0.6, 0.1), (1.0, 0.8, 0.2))),
    "E": SiteStyle(name="E", background=0.3, texture_freq=10.0, texture_amp=0.2,
                   fg_low=0.6, fg_high=1.0, contrast=1.5, noise_sigma=0.04,
                   channel_mix=((0.0, 0.2, 0.3), (0.2, 0.9, 0.0), (1.0, 0.0, 0.1))),
}
DEFAULT_TRAIN_SITE = "A"


@dataclass(frozen=True)
class ShapeGeometry:
    cx: float
    cy: float
    radius: float
    rotation: float

    def to_dict(self) -> Dict[str, float]:
        return {"cx": self.cx, "cy": self.cy, "radius": self.radius, "rotation": self.rotation}


@dataclass
class ShapeSample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    label: int
    site: str
    geometry: ShapeGeometry


@dataclass
class Split:
    """Stacked images and labels of one (site, split)."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    site: str = ""
    classes: Tuple[str, ...] = CLASSES

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"Split {self.name}: {self.images.shape} images vs {self.labels.shape} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_samples(cls, name: str, samples: Sequence[ShapeSample],
                     classes: Tuple[str, ...] = CLASSES) -> "Split":
        images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE))
        labels = np.array([s.label for s in samples], dtype=np.int64)
        site = samples[0].site if samples else ""
        return cls(name, images, labels, site, classes)

    @classmethod
    def concat(cls, name: str, splits: Sequence["Split"]) -> "Split":
        return cls(
            name,
            np.concatenate([s.images for s in splits]),
            np.concatenate([s.labels for s in splits]),
            "+".join(s.site for s in splits),
            splits[0].classes,
        )


@dataclass
class TrainData:
    """Training split, IND validation split and held-out OOD splits."""

    train: Split
    val: Optional[Split] = None
    ood: Dict[str, Split] = field(default_factory=dict)

    def eval_splits(self) -> Dict[str, Split]:
        splits = {"val": self.val} if self.val is not None else {}
        splits.update(self.ood)
        return splits


# Geometry

def draw_geometry(rng: Rng, size: int = IMAGE_SIZE) -> ShapeGeometry:
    radius = float(rng.uniform(0.18 * size, 0.34 * size))
    margin = radius + 1.0
    return ShapeGeometry(
        cx=float(rng.uniform(margin, size - margin)),
        cy=float(rng.uniform(margin, size - margin)),
        radius=radius,
        rotation=float(rng.uniform(0.0, 2 * math.pi)),
    )


def _rotated(points: List[Tuple[float, float]], geom: ShapeGeometry, scale: float) -> List[Tuple[float, float]]:
    c, s = math.cos(geom.rotation), math.sin(geom.rotation)
    return [((geom.cx + x * c - y * s) * scale, (geom.cy + x * s + y * c) * scale) for x, y in points]


def rasterize(shape: str, geom: ShapeGeometry, size: int = IMAGE_SIZE) -> np.ndarray:
    """
    Anti-aliased coverage mask of one shape.

    Args:
        shape: One of CLASSES
        geom: Center, radius and rotation in output pixels
        size: Output side length

    Returns:
        size x size float array in [0, 1]
    """
    big = size * SUPERSAMPLE
    canvas = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(canvas)
    r = geom.radius
    if shape == "disk":
        box = [(geom.cx - r) * SUPERSAMPLE, (geom.cy - r) * SUPERSAMPLE,
               (geom.cx + r) * SUPERSAMPLE, (geom.cy + r) * SUPERSAMPLE]
        draw.ellipse(box, fill=255)
    elif shape == "square":
        h = r * 0.8
        draw.polygon(_rotated([(-h, -h), (h, -h), (h, h), (-h, h)], geom, SUPERSAMPLE), fill=255)
    elif shape == "triangle":
        corners = [(r * math.cos(a), r * math.sin(a)) for a in (0.0, 2 * math.pi / 3, 4 * math.pi / 3)]
        draw.polygon(_rotated(corners, geom, SUPERSAMPLE), fill=255)
    elif shape == "cross":
        arm = r / 3.0
        for bar in ([(-r, -arm), (r, -arm), (r, arm), (-r, arm)], [(-arm, -r), (arm, -r), (arm, r), (-arm, r)]):
            draw.polygon(_rotated(bar, geom, SUPERSAMPLE), fill=255)
    else:
        raise ValueError(f"Unknown shape: {shape}")
    small = canvas.resize((size, size), Image.BOX)
    return np.asarray(small, dtype=np.float64) / 255.0


# Appearance

def apply_style(mask: np.ndarray, style: SiteStyle, rng: Rng) -> np.ndarray:
    """Render a coverage mask as a 3-channel image in the site's style."""
    size = mask.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0.0, math.pi)
    phase = rng.uniform(0.0, 2 * math.pi)
    wave = np.sin(2 * math.pi * style.texture_freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    background = (1.0 - mask) * (style.background + style.texture_amp * wave)
    foreground = mask * rng.uniform(style.fg_low, style.fg_high)
    ambient = np.full_like(mask, 0.5)

    layers = np.stack([foreground, background, ambient])
    image = np.tensordot(np.asarray(style.channel_mix), layers, axes=([1], [0]))
    image = 0.5 + style.contrast * (image - 0.5)
    if style.noise_sigma > 0:
        image = image + rng.normal(0.0, style.noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


class ShapeSiteGenerator:
    """Generate class-balanced shape samples for one site."""

    def __init__(self, classes: Tuple[str, ...] = CLASSES, image_size: int = IMAGE_SIZE, workers: int = 1):
        """
        Initialize the generator.

        Args:
            classes: Shape names; label i is classes[i]
            image_size: Side length of generated images
            workers: Threads rasterizing samples in parallel
        """
        self.logger = logger
        self.classes = classes
        self.image_size = image_size
        self.workers = max(1, workers)

    def _sample(self, rng: Rng, style: SiteStyle, index: int, label: int) -> ShapeSample:
        geom = draw_geometry(rng.stream("geometry", index), self.image_size)
        mask = rasterize(self.classes[label], geom, self.image_size)
        image = apply_style(mask, style, rng.stream("appearance", index))
        return ShapeSample(image=image, label=label, site=style.name, geometry=geom)

    def generate(self, rng: Rng, style: SiteStyle, n_per_class: int) -> List[ShapeSample]:
        """
        Generate n_per_class samples of every class in a seeded order.

        Args:
            rng: Site stream; geometry and appearance are derived per sample
            style: Site appearance
            n_per_class: Samples per class (>= 1)

        Returns:
            List of ShapeSample
        """
        if n_per_class < 1:
            raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
        labels = np.repeat(np.arange(len(self.classes)), n_per_class)
        labels = labels[rng.stream("order").permutation(len(labels))]
        jobs = [(i, int(label)) for i, label in enumerate(labels)]
        if self.workers == 1:
            samples = [self._sample(rng, style, i, label) for i, label in jobs]
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                samples = list(pool.map(lambda job: self._sample(rng, style, *job), jobs))
        self.logger.debug(f"Generated {len(samples)} samples for site {style.name}")
        return samples


def gen_site_dataset(rng: Rng, style: SiteStyle, n_per_class: int,
                     classes: Tuple[str, ...] = CLASSES, workers: int = 1) -> List[ShapeSample]:
    return ShapeSiteGenerator(classes, workers=workers).generate(rng, style, n_per_class)


def gen_benchmark(
    seed: int,
    sites: Sequence[str] = tuple(SITES),
    n_per_class: int = 500,
    test_per_class: int = 125,
    binary: bool = False,
    workers: int = 1,
) -> Dict[str, Dict[str, Split]]:
    """
    Generate train and test splits for every requested site.

    Each site's stream is keyed by its name, so a site's data does not
    depend on which other sites are generated alongside it.

    Returns:
        {site: {"train": Split, "test": Split}}
    """
    classes = BINARY_CLASSES if binary else CLASSES
    master = Rng(seed)
    generator = ShapeSiteGenerator(classes, workers=workers)
    out: Dict[str, Dict[str, Split]] = {}
    for site in sites:
        if site not in SITES:
            raise ValueError(f"Unknown site {site!r}; known sites: {sorted(SITES)}")
        site_rng = master.stream(f"site-{site}")
        out[site] = {
            "train": Split.from_samples(
                "train", generator.generate(site_rng.stream("train"), SITES[site], n_per_class), classes),
            "test": Split.from_samples(
                "test", generator.generate(site_rng.stream("test"), SITES[site], test_per_class), classes),
        }
        logger.info(f"Site {site}: {len(out[site]['train'])} train / {len(out[site]['test'])} test samples")
    return out


def nearest_centroid_gap(train: Split, ind_test: Split, ood_test: Split) -> Tuple[float, float, float]:
    """
    Pixel-space nearest-centroid accuracy on IND and OOD data.

    Returns:
        (IND accuracy, OOD accuracy, IND - OOD)
    """
    flat = train.images.reshape(len(train), -1).astype(np.float64)
    classes = np.unique(train.labels)
    centroids = np.stack([flat[train.labels == c].mean(axis=0) for c in classes])

    def score(split: Split) -> float:
        x = split.images.reshape(len(split), -1).astype(np.float64)
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        return float(np.mean(classes[np.argmin(dists, axis=1)] == split.labels))

    ind, ood = score(ind_test), score(ood_test)
    return ind, ood, ind - ood
