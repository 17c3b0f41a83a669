"""Backbone registry and the regression head used for bone-age prediction.

A model is a convolutional feature extractor with its classifier removed,
followed by BatchNorm -> global average pooling -> dropout -> one linear
output unit. Two trainability regimes are supported: ``FULL`` retrains every
layer, ``FROZEN`` trains the head only.

Pretrained ImageNet backbones come from ``timm``. Weights are looked up as
``$BAA_WEIGHTS_DIR/<backbone_id>.pth`` (a timm state dict); downloading is only
attempted when ``allow_download`` is set or ``BAA_ALLOW_DOWNLOAD=1``.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import CheckpointMismatch, ShapeMismatch, UnknownBackbone, WeightsUnavailable
from .transforms import PreprocessSpec

WEIGHTS_ENV = "BAA_WEIGHTS_DIR"
DOWNLOAD_ENV = "BAA_ALLOW_DOWNLOAD"
DEFAULT_WEIGHTS_DIR = Path.home() / ".cache" / "boneage" / "weights"


class Regime(str, Enum):
    FULL = "full"
    FROZEN = "frozen"

    @classmethod
    def parse(cls, value) -> "Regime":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"regime must be 'full' or 'frozen', got {value!r}") from None


@dataclass(frozen=True)
class HeadConfig:
    dropout_rate: float = 0.5
    batchnorm_epsilon: float = 1e-3
    # decay of the running statistics (Keras convention): new = m * old + (1 - m) * batch
    batchnorm_momentum: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.batchnorm_epsilon <= 0:
            raise ValueError("batchnorm_epsilon must be positive")
        if not 0.0 < self.batchnorm_momentum < 1.0:
            raise ValueError("batchnorm_momentum must be in (0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BackboneSpec:
    id: str
    input_spec: PreprocessSpec
    feature_channels: int
    pretrained_source: str  # "imagenet" or "random"
    timm_name: str | None = None


class TinyBackbone(nn.Module):
    """Three conv/BN/ReLU/max-pool stages; small enough for CPU test runs."""

    def __init__(self, channels=(8, 8, 8)):
        super().__init__()
        layers = []
        c_in = 3
        for c_out in channels:
            layers += [
                nn.Conv2d(c_in, c_out, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            c_in = c_out
        self.features = nn.Sequential(*layers)

    def forward(self, x):
        return self.features(x)


class TimmFeatures(nn.Module):
    """A timm network reduced to its final convolutional feature map."""

    def __init__(self, net: nn.Module):
        super().__init__()
        self.net = net

    def forward(self, x):
        return self.net.forward_features(x)


def _weights_dir() -> Path:
    return Path(os.environ.get(WEIGHTS_ENV, DEFAULT_WEIGHTS_DIR))


def _build_timm(spec: BackboneSpec, pretrained: bool, allow_download: bool) -> nn.Module:
    import timm

    net = timm.create_model(spec.timm_name, pretrained=False)
    if pretrained:
        path = _weights_dir() / f"{spec.id}.pth"
        if path.is_file():
            state = torch.load(path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        elif allow_download:
            net = timm.create_model(spec.timm_name, pretrained=True)
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(net.state_dict(), path)
        else:
            raise WeightsUnavailable(
                f"ImageNet weights for {spec.id} not found at {path}; set {WEIGHTS_ENV} to a directory "
                f"holding {spec.id}.pth or {DOWNLOAD_ENV}=1 to permit download"
            )
    # drop the classifier (and VGG's fully connected pre-logits) so only convolutional features remain
    net.reset_classifier(0)
    if hasattr(net, "pre_logits") and spec.id == "vgg16":
        net.pre_logits = nn.Identity()
    return TimmFeatures(net)


_SYMMETRIC_224 = PreprocessSpec(224, 224, "symmetric")
_SYMMETRIC_299 = PreprocessSpec(299, 299, "symmetric")

_REGISTRY: dict[str, BackboneSpec] = {
    spec.id: spec
    for spec in (
        BackboneSpec("vgg16", PreprocessSpec(224, 224, "unit_interval"), 512, "imagenet", "vgg16"),
        BackboneSpec("inception_v3", _SYMMETRIC_299, 2048, "imagenet", "inception_v3"),
        BackboneSpec("mobilenet", _SYMMETRIC_224, 1024, "imagenet", "mobilenetv1_100"),
        BackboneSpec("xception", _SYMMETRIC_299, 2048, "imagenet", "legacy_xception"),
        BackboneSpec("tiny_test", PreprocessSpec(64, 64, "unit_interval"), 8, "random"),
    )
}

_BUILDERS: dict[str, Callable[[BackboneSpec, bool, bool], nn.Module]] = {
    "vgg16": _build_timm,
    "inception_v3": _build_timm,
    "mobilenet": _build_timm,
    "xception": _build_timm,
    "tiny_test": lambda spec, pretrained, allow: TinyBackbone((8, 8, spec.feature_channels)),
}


def list_backbones() -> list[BackboneSpec]:
    return list(_REGISTRY.values())


def get_backbone(backbone_id: str) -> BackboneSpec:
    try:
        return _REGISTRY[backbone_id]
    except KeyError:
        raise UnknownBackbone(backbone_id) from None


class RegressionHead(nn.Module):
    def __init__(self, channels: int, cfg: HeadConfig):
        super().__init__()
        self.batchnorm = nn.BatchNorm2d(channels, eps=cfg.batchnorm_epsilon, momentum=1.0 - cfg.batchnorm_momentum)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.output = nn.Linear(channels, 1)

    def pooled(self, features):
        return self.pool(self.batchnorm(features)).flatten(1)

    def forward(self, features):
        return self.output(self.dropout(self.pooled(features)))

    def describe(self) -> list[dict]:
        bn = self.batchnorm
        return [
            {"layer": "BatchNormalization", "channels": bn.num_features, "epsilon": bn.eps},
            {"layer": "GlobalAveragePooling"},
            {"layer": "Dropout", "rate": self.dropout.p},
            {"layer": "Dense", "units": self.output.out_features, "activation": "linear"},
        ]


class RegressionModel(nn.Module):
    """Backbone + regression head, returning bone age in months, shape [B, 1].

    The linear output is mapped to months through fixed ``target_offset`` and
    ``target_scale`` buffers (set from the training targets before fitting), so
    the trainable part works on a unit scale.
    """

    def __init__(self, spec: BackboneSpec, backbone: nn.Module, regime: Regime, head: HeadConfig,
                 pretrained_source: str):
        super().__init__()
        self.spec = spec
        self.regime = Regime.parse(regime)
        self.head_config = head
        self.pretrained_source = pretrained_source
        self.backbone = backbone
        self.head = RegressionHead(spec.feature_channels, head)
        self.register_buffer("target_offset", torch.zeros(()))
        self.register_buffer("target_scale", torch.ones(()))
        for p in self.backbone.parameters():
            p.requires_grad_(self.regime is Regime.FULL)
        for p in self.head.parameters():
            p.requires_grad_(True)

    @property
    def backbone_id(self) -> str:
        return self.spec.id

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def train(self, mode: bool = True):
        super().train(mode)
        if self.regime is Regime.FROZEN:
            # frozen backbone keeps its BatchNorm statistics too
            self.backbone.eval()
        return self

    def set_target_scaling(self, offset: float, scale: float) -> None:
        if not scale > 0:
            raise ValueError("target scale must be positive")
        self.target_offset.fill_(float(offset))
        self.target_scale.fill_(float(scale))

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        z = self.head(self.backbone(x))
        return z * self.target_scale + self.target_offset

    def head_parameters(self):
        return list(self.head.parameters())

    def backbone_parameters(self):
        return list(self.backbone.parameters())

    def describe(self) -> dict:
        return {
            "backbone_id": self.spec.id,
            "regime": self.regime.value,
            "pretrained_source": self.pretrained_source,
            "feature_channels": self.spec.feature_channels,
            "head": self.head.describe(),
        }


def build_model(backbone_id: str, regime=Regime.FULL, head: HeadConfig | None = None, seed: int = 0,
                pretrained: bool | None = None, allow_download: bool | None = None) -> RegressionModel:
    """Assemble a backbone and a freshly initialised regression head.

    ``pretrained=None`` follows the registry (ImageNet for the four published backbones);
    ``pretrained=False`` builds the same architecture with random weights.
    """
    spec = get_backbone(backbone_id)
    head = head or HeadConfig()
    regime = Regime.parse(regime)
    use_pretrained = spec.pretrained_source == "imagenet" if pretrained is None else bool(pretrained)
    if spec.pretrained_source == "random":
        use_pretrained = False
    if allow_download is None:
        allow_download = os.environ.get(DOWNLOAD_ENV, "") == "1"

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone = _BUILDERS[backbone_id](spec, use_pretrained, allow_download)
        model = RegressionModel(spec, backbone, regime, head, "imagenet" if use_pretrained else "random")
    return model


def trainable_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def total_parameter_count(model: nn.Module) -> int:
    """All learnable scalars; BatchNorm running statistics are buffers and excluded."""
    return sum(p.numel() for p in model.parameters())


def to_tensor(model: RegressionModel, images) -> torch.Tensor:
    """[B, H, W, C] array -> [B, C, H, W] tensor in the model's dtype, after shape checks."""
    x = torch.as_tensor(np.asarray(images))
    spec = model.spec.input_spec
    expected = (spec.target_height, spec.target_width, 3)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected or x.shape[0] < 1:
        raise ShapeMismatch(f"{model.spec.id} expects images shaped [B, {expected[0]}, {expected[1]}, 3], "
                            f"got {tuple(x.shape)}")
    dtype = next(model.parameters()).dtype
    return x.permute(0, 3, 1, 2).to(dtype).contiguous()


def forward(model: RegressionModel, images, seed: int | None = None) -> np.ndarray:
    """Predict months for a batch without tracking gradients.

    In train mode dropout draws from the torch RNG; pass ``seed`` to make that
    draw reproducible without touching global state.
    """
    x = to_tensor(model, images)
    with torch.no_grad(), torch.random.fork_rng(devices=[], enabled=seed is not None):
        if seed is not None:
            torch.manual_seed(seed)
        out = model(x)
    return out.cpu().numpy()


def backbone_blob(model: RegressionModel) -> bytes:
    """Deterministic byte serialization of every backbone weight and buffer."""
    buf = io.BytesIO()
    for name, tensor in sorted(model.backbone.state_dict().items()):
        buf.write(name.encode())
        buf.write(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return buf.getvalue()


CHECKPOINT_BLOB = "model.pt"
CHECKPOINT_SIDECAR = "model.json"


def save_checkpoint(model: RegressionModel, directory, epoch: int, val_mae: float, seed: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"backbone_id": model.spec.id, "regime": model.regime.value, "state_dict": model.state_dict()},
        directory / CHECKPOINT_BLOB,
    )
    sidecar = {
        "backbone_id": model.spec.id,
        "regime": model.regime.value,
        "head_config": model.head_config.to_json(),
        "epoch": int(epoch),
        "val_mae": float(val_mae),
        "seed": int(seed),
        "pretrained_source": model.pretrained_source,
    }
    (directory / CHECKPOINT_SIDECAR).write_text(json.dumps(sidecar, indent=2))
    return directory


def load_checkpoint(directory) -> tuple[RegressionModel, dict]:
    directory = Path(directory)
    sidecar = json.loads((directory / CHECKPOINT_SIDECAR).read_text())
    blob = torch.load(directory / CHECKPOINT_BLOB, map_location="cpu", weights_only=True)
    if blob.get("backbone_id") != sidecar.get("backbone_id"):
        raise CheckpointMismatch(
            f"sidecar names backbone {sidecar.get('backbone_id')!r} but weights are for {blob.get('backbone_id')!r}"
        )
    model = build_model(
        sidecar["backbone_id"],
        Regime.parse(sidecar["regime"]),
        HeadConfig(**sidecar["head_config"]),
        seed=int(sidecar.get("seed", 0)),
        pretrained=False,
    )
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise CheckpointMismatch(f"weights do not fit {sidecar['backbone_id']}: {exc}") from exc
    model.pretrained_source = sidecar.get("pretrained_source", model.pretrained_source)
    model.eval()
    return model, sidecar
