"""Backbone -> CBAM -> CRM -> GAP -> sigmoid head classifier."""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision import models as tv_models

from .attention import CBAM, ChannelRecalibration
from .errors import ConfigurationError, PretrainedWeightsError, ValidationError

INPUT_SIZE = 256
WEIGHTS_ENV = "GLAUCOMA_ATTN_WEIGHTS"
VARIANTS = ("baseline", "cbam_only", "crm_only", "both")

# final feature-map channel count of every supported backbone
BACKBONE_CHANNELS = {
    "densenet121": 1024,
    "mobilenetv2": 1280,
    "resnet50": 2048,
    "inceptionv3": 2048,
    # reduced stand-in used by smoke tests and CPU-only pipelines
    "tiny": 256,
}


@dataclass(frozen=True)
class BackboneSpec:
    name: str = "densenet121"
    pretrained: bool = True
    trainable: bool = True

    @property
    def output_channels(self) -> int:
        return BACKBONE_CHANNELS[self.name]


class TinyBackbone(nn.Sequential):
    """4x average-pool stem then three stride-2 conv stages: (B, 3, 256, 256) -> (B, 256, 8, 8)."""

    def __init__(self, widths=(64, 128, 256)):
        layers = [nn.AvgPool2d(4)]
        cin = 3
        for w in widths:
            layers += [nn.Conv2d(cin, w, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU()]
            cin = w
        super().__init__(*layers)


class _ReluAfter(nn.Module):
    # torchvision DenseNet/MobileNet applies the last activation in forward(), not in .features
    def __init__(self, features: nn.Module):
        super().__init__()
        self.features = features

    def forward(self, x):
        return F.relu(self.features(x))


def weights_dir() -> Path:
    return Path(os.environ.get(WEIGHTS_ENV, Path.home() / ".cache" / "glaucoma_attn" / "weights"))


def _load_pretrained(net: nn.Module, name: str) -> None:
    path = weights_dir() / f"{name}.pth"
    if not path.is_file():
        raise PretrainedWeightsError(
            f"pretrained weights for {name!r} not found at {path}. Save the torchvision ImageNet "
            f"state dict there (or point ${WEIGHTS_ENV} at a directory holding {name}.pth), "
            f"or set pretrained=false to train from scratch."
        )
    net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))


def _torchvision_backbone(name: str, pretrained: bool) -> nn.Module:
    if name == "densenet121":
        net = tv_models.densenet121(weights=None)
        if pretrained:
            _load_pretrained(net, name)
        return _ReluAfter(net.features)
    if name == "mobilenetv2":
        net = tv_models.mobilenet_v2(weights=None)
        if pretrained:
            _load_pretrained(net, name)
        return net.features  # ends in Conv-BN-ReLU6
    if name == "resnet50":
        net = tv_models.resnet50(weights=None)
        if pretrained:
            _load_pretrained(net, name)
        return nn.Sequential(*list(net.children())[:-2])
    if name == "inceptionv3":
        net = tv_models.inception_v3(weights=None, aux_logits=True, init_weights=True)
        if pretrained:
            _load_pretrained(net, name)
        keep = [m for n, m in net.named_children() if n not in ("AuxLogits", "avgpool", "dropout", "fc")]
        return nn.Sequential(*keep)
    raise ConfigurationError(f"unknown backbone {name!r}; choose from {sorted(BACKBONE_CHANNELS)}")


def make_backbone(spec: BackboneSpec) -> nn.Module:
    if spec.name not in BACKBONE_CHANNELS:
        raise ConfigurationError(f"unknown backbone {spec.name!r}; choose from {sorted(BACKBONE_CHANNELS)}")
    if spec.name == "tiny":
        if spec.pretrained:
            raise PretrainedWeightsError("the 'tiny' backbone has no pretrained weights; use pretrained=false")
        backbone = TinyBackbone()
    else:
        backbone = _torchvision_backbone(spec.name, spec.pretrained)
    if not spec.trainable:
        backbone.requires_grad_(False)
    return backbone


class ClassifierModel(nn.Module):
    """Binary classifier: backbone features refined by CBAM then CRM, pooled, sigmoid head.

    ``variant`` selects which attention blocks run: ``baseline`` pools the
    backbone output directly. All blocks are always constructed, so variants
    built from the same seed share every initial parameter.
    """

    def __init__(
        self,
        backbone: nn.Module,
        channels: int,
        *,
        reduction: int = 16,
        sam_kernel: int = 7,
        variant: str = "both",
        backbone_name: str = "custom",
        input_size: int | None = INPUT_SIZE,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        self.backbone = backbone
        self.cbam = CBAM(channels, reduction, sam_kernel)
        self.crm = ChannelRecalibration()
        self.head = nn.Linear(channels, 1)
        self.channels = channels
        self.variant = variant
        self.backbone_name = backbone_name
        self.input_size = input_size

    @property
    def uses_cbam(self) -> bool:
        return self.variant in ("cbam_only", "both")

    @property
    def uses_crm(self) -> bool:
        return self.variant in ("crm_only", "both")

    def _check_images(self, images: torch.Tensor) -> None:
        s = self.input_size
        if s is not None and (images.dim() != 4 or tuple(images.shape[1:]) != (3, s, s)):
            raise ValidationError(
                f"expected images of shape (B, 3, {s}, {s}) i.e. {s}x{s}x3 RGB, got {tuple(images.shape)}"
            )

    def attention_features(self, images: torch.Tensor) -> torch.Tensor:
        """Feature map after the active attention blocks (F_CRM for the full model)."""
        self._check_images(images)
        f = self.backbone(images)
        if self.uses_cbam:
            f = self.cbam(f)
        if self.uses_crm:
            f = self.crm(f)
        return f

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        f = self.attention_features(images)
        return self.head(f.mean(dim=(2, 3))).squeeze(1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return probability(self.logits(images))


def probability(logits: torch.Tensor) -> torch.Tensor:
    """Sigmoid kept strictly inside (0, 1) despite floating-point saturation."""
    fi = torch.finfo(logits.dtype)
    return torch.sigmoid(logits).clamp(fi.tiny, 1 - fi.eps / 2)


def build_model(
    spec: BackboneSpec,
    seed: int = 0,
    *,
    reduction: int = 16,
    sam_kernel: int = 7,
    variant: str = "both",
) -> ClassifierModel:
    """Build a classifier with deterministic initialisation.

    New layers use torch's default fan-in uniform init drawn under ``seed``;
    BatchNorm starts at scale 1 / shift 0. The global RNG state is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone = make_backbone(spec)
        return ClassifierModel(
            backbone,
            spec.output_channels,
            reduction=reduction,
            sam_kernel=sam_kernel,
            variant=variant,
            backbone_name=spec.name,
        )


def ablation_variant(model: ClassifierModel, mode: str) -> ClassifierModel:
    if mode not in VARIANTS:
        raise ConfigurationError(f"unknown ablation mode {mode!r}; choose from {VARIANTS}")
    out = copy.deepcopy(model)
    out.variant = mode
    return out
