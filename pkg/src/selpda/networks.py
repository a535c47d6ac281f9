"""Shared/private encoders, decoders, classifiers and the gradient-reversal layer."""

from __future__ import annotations

import importlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from selpda.errors import ConfigurationError, ContractError


@dataclass(frozen=True)
class BackboneSpec:
    """Encoder trunk description.

    ``toy_cnn`` is three stride-2 conv blocks followed by a linear map straight
    to the code width. ``external_pretrained`` loads ``factory`` (an import
    path ``"module:callable"`` returning an ``nn.Module`` that maps images to
    ``feature_dim`` features) and adds a linear bottleneck on top.
    """

    kind: str = "toy_cnn"
    feature_dim: int = 256
    conv_widths: tuple[int, ...] = (32, 64, 128)
    factory: str | None = None

    def validate(self, bottleneck):
        if self.kind not in ("toy_cnn", "external_pretrained"):
            raise ConfigurationError(f"unknown backbone kind {self.kind!r}")
        if self.feature_dim < bottleneck:
            raise ConfigurationError("feature_dim must be >= bottleneck width")
        if self.kind == "toy_cnn" and (len(self.conv_widths) != 3 or min(self.conv_widths) < 1):
            raise ConfigurationError("toy_cnn needs three positive conv widths")
        if self.kind == "external_pretrained" and not self.factory:
            raise ConfigurationError("external_pretrained backbone needs a factory import path")


@dataclass(frozen=True)
class NetworkConfig:
    n_classes: int
    image_shape: tuple[int, int, int] = (3, 32, 32)
    content_dim: int = 256
    style_dim: int = 64
    decoder_width: int = 32
    discriminator_width: int = 256
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    def validate(self):
        c, h, w = self.image_shape
        if h != w or h % 8:
            raise ConfigurationError("images must be square with side divisible by 8")
        if self.n_classes < 2:
            raise ConfigurationError("at least two source classes required")
        self.backbone.validate(self.content_dim)


class GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coeff, None


def grl_apply(x, coeff: float):
    """Identity forward; backward multiplies the incoming gradient by ``-coeff``."""
    if coeff < 0:
        raise ContractError("GRL coefficient must be nonnegative")
    return GradReverse.apply(x, float(coeff))


def grl_schedule(progress: float, gamma: float = 10.0) -> float:
    return 2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0


class ToyCNN(nn.Module):
    def __init__(self, in_channels, image_size, widths, out_dim):
        super().__init__()
        layers, prev = [], in_channels
        for i, width in enumerate(widths):
            layers += [nn.Conv2d(prev, width, 3, stride=2, padding=1), nn.ReLU()]
            prev = width
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(prev * (image_size // 8) ** 2, out_dim)

    def forward(self, x):
        return self.fc(self.conv(x).flatten(1))


class PretrainedEncoder(nn.Module):
    """External feature extractor plus a freshly initialized bottleneck."""

    def __init__(self, backbone: nn.Module, feature_dim, out_dim):
        super().__init__()
        self.backbone = backbone
        self.bottleneck = nn.Linear(feature_dim, out_dim)

    def forward(self, x):
        return self.bottleneck(self.backbone(x).flatten(1))


def _load_factory(path):
    module, _, attr = path.partition(":")
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigurationError(f"cannot import backbone factory {path!r}") from exc


def build_encoder(spec: BackboneSpec, image_shape, out_dim):
    c, size, _ = image_shape
    if spec.kind == "toy_cnn":
        return ToyCNN(c, size, spec.conv_widths, out_dim)
    return PretrainedEncoder(_load_factory(spec.factory)(), spec.feature_dim, out_dim)


class Decoder(nn.Module):
    """Linear map to an (H/8)x(H/8) grid, three conv+relu+upsample stages, final conv."""

    def __init__(self, code_dim, image_shape, width):
        super().__init__()
        channels, size, _ = image_shape
        self.width, self.start = width, size // 8
        self.fc = nn.Linear(code_dim, width * self.start**2)
        layers = []
        for _ in range(3):
            layers += [nn.Conv2d(width, width, 3, padding=1), nn.ReLU(), nn.Upsample(scale_factor=2, mode="nearest")]
        layers.append(nn.Conv2d(width, channels, 3, padding=1))
        self.conv = nn.Sequential(*layers)

    def forward(self, code):
        return self.conv(self.fc(code).view(-1, self.width, self.start, self.start))


class LabelClassifier(nn.Module):
    def __init__(self, in_dim, n_classes):
        super().__init__()
        self.fc = nn.Linear(in_dim, n_classes)

    def forward(self, content):
        return torch.softmax(self.fc(content), dim=1)


class DomainClassifier(nn.Module):
    """Probability that a content code comes from the source domain."""

    def __init__(self, in_dim, width):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, width), nn.ReLU(),
            nn.Linear(width, width), nn.ReLU(),
            nn.Linear(width, 1),
        )

    def forward(self, content):
        return torch.sigmoid(self.net(content)).squeeze(1)


class NetworkBundle(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        shape, bb = config.image_shape, config.backbone
        self.shared_encoder = build_encoder(bb, shape, config.content_dim)
        self.private_encoder_source = build_encoder(bb, shape, config.style_dim)
        self.private_encoder_target = build_encoder(bb, shape, config.style_dim)
        code = config.content_dim + config.style_dim
        self.decoder_source = Decoder(code, shape, config.decoder_width)
        self.decoder_target = Decoder(code, shape, config.decoder_width)
        self.label_classifier = LabelClassifier(config.content_dim, config.n_classes)
        self.domain_classifier = DomainClassifier(config.content_dim, config.discriminator_width)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def _private(self, domain):
        domain = str(getattr(domain, "value", domain))
        if domain == "source":
            return self.private_encoder_source, self.decoder_source
        if domain == "target":
            return self.private_encoder_target, self.decoder_target
        raise ContractError(f"unknown domain {domain!r}")

    def as_tensor(self, images):
        x = torch.as_tensor(np.array(images) if not torch.is_tensor(images) else images,
                            dtype=self.dtype)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.config.image_shape):
            raise ContractError(f"expected images of shape (N, {self.config.image_shape}), got {tuple(x.shape)}")
        return x

    def content(self, x):
        return self.shared_encoder(x)

    def style(self, x, domain):
        return self._private(domain)[0](x)

    def decode(self, content, style, domain):
        return self._private(domain)[1](torch.cat([content, style], dim=1))

    def reconstruct(self, x, domain):
        return self.decode(self.content(x), self.style(x, domain), domain)

    def discriminate(self, content, grl_coeff=1.0):
        return self.domain_classifier(grl_apply(content, grl_coeff))

    def forward(self, x):
        return self.label_classifier(self.content(x))

    def parameter_groups(self):
        """``(pretrained, new)`` parameter lists; new layers train at the multiplied rate."""
        pretrained, new = [], []
        for name, p in self.named_parameters():
            (pretrained if ".backbone." in name else new).append(p)
        return pretrained, new


def forward_content(bundle: NetworkBundle, images):
    return bundle.content(bundle.as_tensor(images))


def forward_reconstruction(bundle: NetworkBundle, images, domain):
    return bundle.reconstruct(bundle.as_tensor(images), domain)
