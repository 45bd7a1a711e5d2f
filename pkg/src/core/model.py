"""Small configurable CNN built from the autodiff primitives.

Each stage is `convs_per_stage` x (3x3 conv -> norm -> ReLU); the first
conv of a downsampling stage has stride 2. The head is global average
pooling followed by a linear layer.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core import tensor as T
from src.core.exceptions import IntegrityError, ShapeError
from src.core.normalization import ForwardContext, NormConfig, NormLayer, build_norm_layer
from src.core.rng import Rng
from src.core.tensor import Tensor
from src.core.tensor_io import as_rank4, read_wt4, write_wt4
from src.core.window_sampling import LayerSite
from src.utils.logger import logger

MANIFEST_NAME = "manifest.json"


class StageSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    out_channels: int = Field(gt=0)
    norm: NormConfig = Field(default_factory=NormConfig)
    downsample: bool = True
    convs_per_stage: int = Field(default=2, ge=1)


class CnnSpec(BaseModel):
    """Backbone description: stages, input dims (C, H, W), classes and init seed."""

    model_config = ConfigDict(extra="forbid")

    stages: List[StageSpec] = Field(min_length=1)
    input_dims: Tuple[int, int, int] = (3, 32, 32)
    num_classes: int = Field(default=4, ge=2)
    init_seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_win_layers_agree(self):
        # One region source serves every WIN layer of a forward pass
        keys = {
            (s.norm.strategy, s.norm.tau, s.norm.share_window_across_layers)
            for s in self.stages
            if s.norm.kind == "WIN"
        }
        if len(keys) > 1:
            raise ValueError("All WIN stages must share strategy, tau and share_window_across_layers")
        return self

    @classmethod
    def default(
        cls,
        norm: Optional[NormConfig] = None,
        channels: Sequence[int] = (32, 64, 128),
        num_classes: int = 4,
        init_seed: int = 0,
        input_dims: Tuple[int, int, int] = (3, 32, 32),
        convs_per_stage: int = 2,
    ) -> "CnnSpec":
        norm = norm or NormConfig()
        stages = [
            StageSpec(out_channels=c, norm=norm, downsample=True, convs_per_stage=convs_per_stage)
            for c in channels
        ]
        return cls(stages=stages, input_dims=input_dims, num_classes=num_classes, init_seed=init_seed)

    def norm_kinds(self) -> List[str]:
        return [s.norm.kind for s in self.stages]


def conv_out(size: int, stride: int) -> int:
    return (size + 2 - 3) // stride + 1


def param_count(spec: CnnSpec) -> int:
    """Closed-form number of trainable parameters for `spec`."""
    total = 0
    c_in = spec.input_dims[0]
    for stage in spec.stages:
        c = stage.out_channels
        affine = 2 * c if stage.norm.use_affine() else 0
        total += 9 * c_in * c + affine
        total += (stage.convs_per_stage - 1) * (9 * c * c + affine)
        c_in = c
    return total + c_in * spec.num_classes + spec.num_classes


@dataclass
class ConvUnit:
    """One conv -> norm -> ReLU unit."""

    weight: str
    stride: int
    norm: NormLayer
    out_dims: Tuple[int, int]


@dataclass
class ModelOutput:
    logits: Tensor
    features: Tensor


class ConvNet:
    """Parameters, normalization layers and the forward pass of one CnnSpec."""

    def __init__(self, spec: CnnSpec):
        """
        Build and deterministically initialize the network.

        Args:
            spec: Backbone description

        Raises:
            ShapeError: If spatial dims collapse below 1 x 1 before the head
        """
        self.spec = spec
        self.params: Dict[str, Tensor] = {}
        self.units: List[ConvUnit] = []
        init = Rng(spec.init_seed).stream("init")

        c_in, h, w = spec.input_dims
        image_dims = (h, w)
        for i, stage in enumerate(spec.stages):
            for j in range(stage.convs_per_stage):
                stride = 2 if stage.downsample and j == 0 else 1
                h, w = conv_out(h, stride), conv_out(w, stride)
                if h < 1 or w < 1:
                    raise ShapeError(f"Stage {i} collapses the {image_dims} input below 1 x 1")
                name = f"stage{i}.conv{j}.weight"
                fan_in = 9 * c_in
                weight = init.normal(0.0, np.sqrt(2.0 / fan_in), (stage.out_channels, c_in, 3, 3))
                self.params[name] = Tensor(weight, requires_grad=True)
                norm = build_norm_layer(stage.norm, stage.out_channels, f"stage{i}.norm{j}", image_dims)
                for key, p in norm.parameters().items():
                    p.requires_grad = True
                    self.params[key] = p
                self.units.append(ConvUnit(name, stride, norm, (h, w)))
                c_in = stage.out_channels

        head = init.normal(0.0, np.sqrt(2.0 / c_in), (c_in, spec.num_classes))
        self.params["head.weight"] = Tensor(head, requires_grad=True)
        self.params["head.bias"] = Tensor(np.zeros(spec.num_classes), requires_grad=True)

    @property
    def norm_layers(self) -> List[NormLayer]:
        return [unit.norm for unit in self.units]

    def has_kind(self, kind: str) -> bool:
        return any(layer.kind == kind for layer in self.norm_layers)

    def win_sites(self) -> List[LayerSite]:
        """WIN layers that draw spatial regions, in forward order."""
        sites = []
        for unit in self.units:
            layer = unit.norm
            if layer.kind == "WIN" and layer.config.strategy != "Speckle":
                sites.append(LayerSite(layer.layer_id, unit.out_dims, layer.partition_for(unit.out_dims)))
        return sites

    def region_config(self) -> Optional[NormConfig]:
        for layer in self.norm_layers:
            if layer.kind == "WIN":
                return layer.config
        return None

    def forward(self, x: Union[Tensor, np.ndarray], ctx: ForwardContext) -> ModelOutput:
        if not isinstance(x, Tensor):
            x = T.tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_dims):
            raise ShapeError(f"Model expects N x {self.spec.input_dims}, got {x.shape}")
        f = x
        for unit in self.units:
            f = T.conv2d(f, self.params[unit.weight], stride=unit.stride, pad=1)
            f = unit.norm.forward(f, ctx)
            f = T.relu(f)
        features = T.global_avgpool(f)
        logits = T.linear(features, self.params["head.weight"], self.params["head.bias"])
        return ModelOutput(logits=logits, features=features)

    def __call__(self, x, ctx: ForwardContext) -> Tensor:
        return self.forward(x, ctx).logits

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits, computed batch by batch without recording a tape."""
        outputs = []
        ctx = ForwardContext.evaluation()
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                outputs.append(self.forward(images[start:start + batch_size], ctx).logits.data)
        return np.concatenate(outputs, axis=0)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for layer in self.norm_layers:
            out.update(layer.buffers())
        return out

    def load_buffers(self, buffers: Dict[str, np.ndarray]):
        for layer in self.norm_layers:
            if layer.buffers():
                layer.load_buffers(buffers)

    def layer_stats(self) -> Dict[str, Dict[str, float]]:
        return {layer.layer_id: dict(layer.last_stats) for layer in self.norm_layers}

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}


def build_model(spec: CnnSpec) -> ConvNet:
    model = ConvNet(spec)
    logger.debug(f"Built model with {param_count(spec)} parameters, norms {spec.norm_kinds()}")
    return model


# Checkpoints

def save_checkpoint(model: ConvNet, directory: Union[str, Path], extra: Optional[Dict] = None) -> Path:
    """
    Write every parameter as a WT4 file plus a JSON manifest.

    Args:
        model: Model to save
        directory: Checkpoint directory (created if missing)
        extra: Additional manifest fields (train config, epoch, metrics)

    Returns:
        Path of the manifest
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, p in model.params.items():
        filename = f"{name}.wt4"
        digest = write_wt4(directory / filename, as_rank4(p.data))
        tensors[name] = {"file": filename, "shape": list(p.shape), "sha256": digest}
    manifest = {
        "spec": model.spec.model_dump(mode="json"),
        "tensors": tensors,
        # float64 running statistics survive a JSON round trip exactly
        "buffers": {k: v.tolist() for k, v in model.buffers().items()},
    }
    manifest.update(extra or {})
    path = directory / MANIFEST_NAME
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, default=str)
    logger.info(f"Saved checkpoint to {directory}")
    return path


def load_checkpoint(directory: Union[str, Path]) -> Tuple[ConvNet, Dict]:
    """
    Rebuild a model from a checkpoint directory.

    Raises:
        IntegrityError: Missing manifest or tensor file, checksum or shape mismatch
    """
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise IntegrityError(f"No checkpoint manifest in {directory}")
    try:
        with open(path, "r") as f:
            manifest = json.load(f)
        spec = CnnSpec.model_validate(manifest["spec"])
        entries = manifest["tensors"]
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise IntegrityError(f"Malformed checkpoint manifest {path}: {e}")

    model = ConvNet(spec)
    if set(entries) != set(model.params):
        raise IntegrityError(f"Checkpoint tensors do not match the model spec in {directory}")
    for name, p in model.params.items():
        entry = entries[name]
        array = read_wt4(directory / entry["file"], entry.get("sha256"))
        if int(np.prod(array.shape)) != p.size:
            raise IntegrityError(f"Tensor {name} has {array.size} values, expected {p.size}")
        p.data = array.reshape(p.shape).astype(p.dtype)
    buffers = {k: np.asarray(v, dtype=np.float64) for k, v in manifest.get("buffers", {}).items()}
    try:
        model.load_buffers(buffers)
    except KeyError as e:
        raise IntegrityError(f"Checkpoint is missing buffer {e}")
    return model, manifest


def check_compatible(model: ConvNet, images: np.ndarray, num_classes: int):
    if tuple(images.shape[1:]) != tuple(model.spec.input_dims):
        raise IntegrityError(f"Data shape {images.shape[1:]} does not match model input {model.spec.input_dims}")
    if num_classes != model.spec.num_classes:
        raise IntegrityError(f"Data has {num_classes} classes, model predicts {model.spec.num_classes}")
