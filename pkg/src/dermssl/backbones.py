"""Convolutional encoders and their mirrored decoders.

Two families share one interface: ``forward_features`` returns the pooled,
normalized final-stage feature; ``stages`` and ``final_stage_modules`` expose
the structure needed for freezing and partial fine-tuning.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, ShapeError

FAMILIES = ("convnext_tiny_style", "toy_cnn")
INITS = ("random", "external_pretrained")


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "toy_cnn"
    stage_widths: tuple[int, ...] = (16, 32, 64)
    depths: tuple[int, ...] = field(default=())
    init: str = "random"
    image_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown backbone family {self.family!r}")
        if self.family == "toy_cnn":
            # one conv block per stage; depths carry no meaning here
            object.__setattr__(self, "depths", ())
        if self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}")
        if not self.stage_widths or min(self.stage_widths) < 1:
            raise ConfigError("stage_widths must be non-empty and positive")
        if self.family == "convnext_tiny_style":
            if len(self.depths) != len(self.stage_widths):
                raise ConfigError("convnext_tiny_style needs one depth per stage")
        if self.image_size % self.downsample_factor:
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by {self.downsample_factor}"
            )

    @classmethod
    def convnext_tiny(cls, image_size: int = 224, init: str = "random") -> "BackboneSpec":
        return cls("convnext_tiny_style", (96, 192, 384, 768), (3, 3, 9, 3), init, image_size)

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    @property
    def downsample_factor(self) -> int:
        n = len(self.stage_widths)
        return 2**n if self.family == "toy_cnn" else 4 * 2 ** (n - 1)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "stage_widths": list(self.stage_widths),
            "depths": list(self.depths),
            "init": self.init,
            "image_size": self.image_size,
        }


def _fan_in(m: nn.Module) -> int:
    w = m.weight
    if isinstance(m, nn.ConvTranspose2d):
        return (w.shape[0] // m.groups) * w[0, 0].numel()
    return w[0].numel()


def init_weights(module: nn.Module, std: float | None = 0.02) -> None:
    """Truncated-normal kernels (cut at two standard deviations), zero biases.

    ``std=None`` scales each layer by ``sqrt(2 / fan_in)``; the fixed 0.02 of
    the ConvNeXt recipe starves the narrow toy layers of signal.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            s = math.sqrt(2.0 / _fan_in(m)) if std is None else std
            nn.init.trunc_normal_(m.weight, std=s, a=-2 * s, b=2 * s)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class LayerNorm2d(nn.LayerNorm):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = super().forward(x)
        return x.permute(0, 3, 1, 2)


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int, layer_scale: float = 1e-6):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.act = nn.GELU()
        self.pwconv2 = nn.Linear(4 * dim, dim)
        self.gamma = nn.Parameter(torch.full((dim,), layer_scale))

    def forward(self, x):
        shortcut = x
        x = self.dwconv(x).permute(0, 2, 3, 1)
        x = self.pwconv2(self.act(self.pwconv1(self.norm(x))))
        x = (self.gamma * x).permute(0, 3, 1, 2)
        return shortcut + x


class ConvNeXtStage(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, depth: int, downsample: bool):
        super().__init__()
        if downsample:
            self.downsample = nn.Sequential(
                LayerNorm2d(in_dim, eps=1e-6), nn.Conv2d(in_dim, out_dim, 2, stride=2)
            )
        else:
            self.downsample = nn.Identity()
        self.blocks = nn.Sequential(*[ConvNeXtBlock(out_dim) for _ in range(depth)])

    def forward(self, x):
        return self.blocks(self.downsample(x))


class Backbone(nn.Module):
    """Common surface for encoders: stem, stages, pooled final norm."""

    spec: BackboneSpec
    stem: nn.Module
    stages: nn.ModuleList
    norm: nn.Module

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def check_input(self, x: torch.Tensor) -> None:
        s = self.spec.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise ShapeError("encoder input", f"(N, 3, {s}, {s})", tuple(x.shape))

    def forward_maps(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return x

    def forward_features(self, x):
        self.check_input(x)
        return self.norm(self.forward_maps(x).mean(dim=(2, 3)))

    forward = forward_features

    def final_stage_modules(self) -> list[nn.Module]:
        return [self.stages[-1], self.norm]

    def stage_groups(self) -> dict[str, list[nn.Module]]:
        groups = {"stem": [self.stem]}
        for i, stage in enumerate(self.stages[:-1]):
            groups[f"stage{i}"] = [stage]
        groups["final"] = self.final_stage_modules()
        return groups


class ConvNeXtEncoder(Backbone):
    """ConvNeXt-style encoder: patchify stem, four stages of depthwise 7x7
    inverted-bottleneck blocks, LayerNorm throughout."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        w = spec.stage_widths
        self.stem = nn.Sequential(nn.Conv2d(3, w[0], 4, stride=4), LayerNorm2d(w[0], eps=1e-6))
        self.stages = nn.ModuleList(
            ConvNeXtStage(w[max(i - 1, 0)], w[i], spec.depths[i], downsample=i > 0)
            for i in range(len(w))
        )
        self.norm = nn.LayerNorm(w[-1], eps=1e-6)
        init_weights(self)


class ToyEncoder(Backbone):
    """Small strided CNN; each stage halves resolution."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        w = spec.stage_widths
        self.stem = nn.Identity()
        chans = (3,) + w
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1),
                nn.GroupNorm(1, chans[i + 1]),
                nn.GELU(),
                nn.Conv2d(chans[i + 1], chans[i + 1], 3, padding=1),
                nn.GELU(),
            )
            for i in range(len(w))
        )
        self.norm = nn.LayerNorm(w[-1])
        init_weights(self, std=None)

    def stage_groups(self) -> dict[str, list[nn.Module]]:
        groups = {f"stage{i}": [s] for i, s in enumerate(self.stages[:-1])}
        groups["final"] = self.final_stage_modules()
        return groups


class ConvNeXtDecoder(nn.Module):
    """Mirror of :class:`ConvNeXtEncoder` with transposed convolutions
    upsampling where the encoder downsamples."""

    def __init__(self, spec: BackboneSpec, latent_dim: int):
        super().__init__()
        self.spec = spec
        w = spec.stage_widths[::-1]
        depths = spec.depths[::-1]
        self.side = spec.image_size // spec.downsample_factor
        self.project = nn.Linear(latent_dim, w[0])
        # inverse of global pooling: a per-channel learned spatial template
        self.unpool = nn.ConvTranspose2d(w[0], w[0], self.side, groups=w[0])
        stages = []
        for i, (width, depth) in enumerate(zip(w, depths)):
            blocks = [ConvNeXtBlock(width) for _ in range(depth)]
            if i < len(w) - 1:
                up = nn.Sequential(
                    LayerNorm2d(width, eps=1e-6), nn.ConvTranspose2d(width, w[i + 1], 2, stride=2)
                )
            else:
                up = nn.Identity()
            stages.append(nn.Sequential(*blocks, up))
        self.stages = nn.ModuleList(stages)
        self.head = nn.Sequential(
            LayerNorm2d(w[-1], eps=1e-6), nn.ConvTranspose2d(w[-1], 3, 4, stride=4)
        )
        init_weights(self)

    def forward(self, z):
        x = self.unpool(self.project(z)[:, :, None, None])
        for stage in self.stages:
            x = stage(x)
        return torch.sigmoid(self.head(x))


class ToyDecoder(nn.Module):
    def __init__(self, spec: BackboneSpec, latent_dim: int):
        super().__init__()
        self.spec = spec
        w = spec.stage_widths[::-1]
        self.side = spec.image_size // spec.downsample_factor
        self.project = nn.Linear(latent_dim, w[0])
        # inverse of global pooling: a per-channel learned spatial template
        self.unpool = nn.ConvTranspose2d(w[0], w[0], self.side, groups=w[0])
        chans = w + (w[-1],)
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[i], chans[i], 3, padding=1),
                nn.GELU(),
                nn.ConvTranspose2d(chans[i], chans[i + 1], 4, stride=2, padding=1),
                nn.GroupNorm(1, chans[i + 1]),
                nn.GELU(),
            )
            for i in range(len(w))
        )
        self.head = nn.Conv2d(chans[-1], 3, 3, padding=1)
        init_weights(self, std=None)

    def forward(self, z):
        x = self.unpool(self.project(z)[:, :, None, None])
        for stage in self.stages:
            x = stage(x)
        return torch.sigmoid(self.head(x))


def build_encoder(spec: BackboneSpec) -> Backbone:
    return ConvNeXtEncoder(spec) if spec.family == "convnext_tiny_style" else ToyEncoder(spec)


def build_decoder(spec: BackboneSpec, latent_dim: int) -> nn.Module:
    if spec.family == "convnext_tiny_style":
        return ConvNeXtDecoder(spec, latent_dim)
    return ToyDecoder(spec, latent_dim)


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def checksum(*modules: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in registration order."""
    h = hashlib.sha256()
    for m in modules:
        for name, t in m.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def stage_checksums(backbone: Backbone) -> dict[str, str]:
    return {name: checksum(*mods) for name, mods in backbone.stage_groups().items()}


def convert_torchvision_convnext(state_dict: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Rename a torchvision ``convnext_*`` state dict to :class:`ConvNeXtEncoder` keys.

    The classifier's linear layer is dropped; its LayerNorm becomes the
    encoder's pooled-feature norm.
    """
    out = {}
    block_parts = {"0": "dwconv", "2": "norm", "3": "pwconv1", "5": "pwconv2"}
    for key, value in state_dict.items():
        parts = key.split(".")
        if parts[0] == "classifier":
            if parts[1] == "0":
                out[f"norm.{parts[2]}"] = value
            continue
        idx = int(parts[1])
        if idx == 0:
            out[f"stem.{parts[2]}.{parts[3]}"] = value
        elif idx % 2 == 0:
            out[f"stages.{idx // 2}.downsample.{parts[2]}.{parts[3]}"] = value
        else:
            stage, block = (idx - 1) // 2, parts[2]
            prefix = f"stages.{stage}.blocks.{block}"
            if parts[3] == "layer_scale":
                out[f"{prefix}.gamma"] = value.reshape(-1)
            else:
                out[f"{prefix}.{block_parts[parts[4]]}.{parts[5]}"] = value
    return out


def load_torchvision_convnext_tiny(image_size: int = 224, weights: str | None = "DEFAULT") -> ConvNeXtEncoder:
    """ConvNeXt-Tiny encoder carrying torchvision's ImageNet weights.

    Needs torchvision and, for ``weights`` other than ``None``, access to its
    weight cache or download location.
    """
    import torchvision

    tv = torchvision.models.convnext_tiny(weights=weights)
    spec = BackboneSpec.convnext_tiny(image_size, init="external_pretrained" if weights else "random")
    enc = ConvNeXtEncoder(spec)
    enc.load_state_dict(convert_torchvision_convnext(tv.state_dict()))
    return enc
