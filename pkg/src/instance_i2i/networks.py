"""Encoders, AdaIN decoder and multi-scale patch discriminators.

One content encoder, style encoder and decoder per domain serve every
granularity (global images, instance crops, half-scale images) by parameter
tying.  Discriminators are either one set per domain (``shared_D``) or one for
images and one for instances (``separate_D``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_model import ContentCode, DomainId, Granularity, ImageSample, StyleCode

ADAIN_EPS = 1e-5
SHARED_D = "shared_D"
SEPARATE_D = "separate_D"


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 16
    content_downsamples: int = 2
    style_downsamples: int = 2
    n_residual_blocks: int = 2
    style_dim: int = 8
    mlp_dim: int = 32
    discriminator_scales: int = 2
    discriminator_layers: int = 2
    weight_sharing: str = SHARED_D

    def __post_init__(self):
        for name in ("base_channels", "content_downsamples", "style_downsamples", "n_residual_blocks",
                     "style_dim", "mlp_dim", "discriminator_scales", "discriminator_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"network.{name} must be >= 1")
        if self.weight_sharing not in (SHARED_D, SEPARATE_D):
            raise ValueError(f"network.weight_sharing must be {SHARED_D!r} or {SEPARATE_D!r}")

    @property
    def content_channels(self) -> int:
        return self.base_channels * 2**self.content_downsamples

    def to_dict(self) -> dict:
        return asdict(self)


def adain(x: torch.Tensor, mean: torch.Tensor, std: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Renormalise each channel of ``x`` (N, C, H, W) to the given (N, C) statistics.

    Uses the biased spatial std of ``x`` and adds ``eps`` to it, not to the variance.
    """
    if x.dim() != 4:
        raise ValueError(f"expected (N, C, H, W) features, got shape {tuple(x.shape)}")
    n, c = x.shape[:2]
    if mean.shape != (n, c) or std.shape != (n, c):
        raise ValueError(
            f"style params must have shape {(n, c)}, got mean {tuple(mean.shape)} std {tuple(std.shape)}"
        )
    if bool((std <= 0).any()):
        raise ValueError("style std must be positive")
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    # clamp keeps the sqrt differentiable on constant channels
    sigma = var.clamp_min(1e-24).sqrt()
    return std[:, :, None, None] * (x - mu) / (sigma + eps) + mean[:, :, None, None]


class ResBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(dim, dim, 3, 1, 1),
            nn.InstanceNorm2d(dim),
            nn.ReLU(),
            nn.Conv2d(dim, dim, 3, 1, 1),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.block(x)


class AdaINResBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.conv1 = nn.Conv2d(dim, dim, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim, dim, 3, 1, 1)

    n_params_per_block = 4  # (mean, std) for each of the two convs

    def forward(self, x, params):
        m1, s1, m2, s2 = params
        y = F.relu(adain(self.conv1(x), m1, s1))
        y = adain(self.conv2(y), m2, s2)
        return x + y


class ContentEncoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        dim = cfg.base_channels
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(3, dim, 7), nn.InstanceNorm2d(dim), nn.ReLU()]
        for _ in range(cfg.content_downsamples):
            layers += [nn.Conv2d(dim, dim * 2, 4, 2, 1), nn.InstanceNorm2d(dim * 2), nn.ReLU()]
            dim *= 2
        layers += [ResBlock(dim) for _ in range(cfg.n_residual_blocks)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class StyleEncoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        dim = cfg.base_channels
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(3, dim, 7), nn.ReLU()]
        for _ in range(cfg.style_downsamples):
            layers += [nn.Conv2d(dim, dim * 2, 4, 2, 1), nn.ReLU()]
            dim *= 2
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.model = nn.Sequential(*layers)
        self.fc = nn.Linear(dim, cfg.style_dim)

    def forward(self, x):
        return self.fc(self.model(x))


class Decoder(nn.Module):
    """AdaIN residual blocks followed by upsampling back to image space.

    Style enters only through ``mlp``, which emits the (mean, std) of every
    AdaIN layer.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        dim = cfg.content_channels
        self.dim = dim
        self.blocks = nn.ModuleList(AdaINResBlock(dim) for _ in range(cfg.n_residual_blocks))
        n_params = dim * AdaINResBlock.n_params_per_block * cfg.n_residual_blocks
        self.mlp = nn.Sequential(
            nn.Linear(cfg.style_dim, cfg.mlp_dim),
            nn.ReLU(),
            nn.Linear(cfg.mlp_dim, cfg.mlp_dim),
            nn.ReLU(),
            nn.Linear(cfg.mlp_dim, n_params),
        )
        up = []
        for _ in range(cfg.content_downsamples):
            up += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(dim, dim // 2, 5, 1, 2),
                nn.GroupNorm(1, dim // 2),
                nn.ReLU(),
            ]
            dim //= 2
        up += [nn.ReflectionPad2d(3), nn.Conv2d(dim, 3, 7), nn.Tanh()]
        self.up = nn.Sequential(*up)

    def adain_params(self, style):
        raw = self.mlp(style)
        chunks = raw.split(self.dim, dim=1)
        params = []
        for i in range(0, len(chunks), 2):
            params.append(chunks[i])  # mean
            params.append(F.softplus(chunks[i + 1]) + 1e-4)  # std, strictly positive
        return [params[i : i + 4] for i in range(0, len(params), 4)]

    def forward(self, content, style):
        x = content
        for block, p in zip(self.blocks, self.adain_params(style)):
            x = block(x, p)
        return self.up(x)


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        dim = cfg.base_channels
        layers, in_dim = [], 3
        for _ in range(cfg.discriminator_layers):
            layers += [nn.Conv2d(in_dim, dim, 4, 2, 1), nn.LeakyReLU(0.2)]
            in_dim, dim = dim, dim * 2
        layers.append(nn.Conv2d(in_dim, 1, 1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.layers = cfg.discriminator_layers
        self.nets = nn.ModuleList(PatchDiscriminator(cfg) for _ in range(cfg.discriminator_scales))

    def min_size(self) -> int:
        return 2 ** (self.layers + len(self.nets) - 1)

    def forward(self, x):
        if min(x.shape[-2:]) < self.min_size():
            raise DimensionError(
                f"discriminator needs inputs of at least {self.min_size()}px, got {tuple(x.shape[-2:])}"
            )
        outs = []
        for net in self.nets:
            outs.append(net(x))
            x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
        return outs


def _disc_slot(granularity: Granularity) -> str:
    return "instance" if granularity in (Granularity.INSTANCE, Granularity.BACKGROUND) else "global"


def _init_generator(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.Linear)):
        nn.init.kaiming_normal_(m.weight, a=0, mode="fan_in")
        nn.init.zeros_(m.bias)


def _init_discriminator(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.Linear)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        nn.init.zeros_(m.bias)


class TranslationModel(nn.Module):
    """Two-domain family of encoders, decoders and discriminators.

    Encoders and decoders start from He-normal weights, discriminators from
    N(0, 0.02); all biases start at zero.
    """

    def __init__(self, cfg: NetworkConfig | None = None, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg = cfg or NetworkConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.content_encoders = nn.ModuleList(ContentEncoder(cfg) for _ in range(2))
            self.style_encoders = nn.ModuleList(StyleEncoder(cfg) for _ in range(2))
            self.decoders = nn.ModuleList(Decoder(cfg) for _ in range(2))
            slots = ["global"] if cfg.weight_sharing == SHARED_D else ["global", "instance"]
            self.discriminators = nn.ModuleDict(
                {f"{d}_{s}": MultiScaleDiscriminator(cfg) for d in range(2) for s in slots}
            )
            for group in (self.content_encoders, self.style_encoders, self.decoders):
                group.apply(_init_generator)
            self.discriminators.apply(_init_discriminator)
        self.to(dtype)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    @property
    def shared_d(self) -> bool:
        return self.cfg.weight_sharing == SHARED_D

    def generator_parameters(self):
        for group in (self.content_encoders, self.style_encoders, self.decoders):
            yield from group.parameters()

    def discriminator_parameters(self):
        return self.discriminators.parameters()

    def discriminator(self, domain: int, granularity: Granularity) -> MultiScaleDiscriminator:
        slot = "global" if self.shared_d else _disc_slot(granularity)
        return self.discriminators[f"{domain}_{slot}"]

    def check_input(self, x: torch.Tensor) -> None:
        k = 2**self.cfg.content_downsamples
        h, w = x.shape[-2:]
        if h < k or w < k or h % k or w % k or min(h, w) < 4:
            raise DimensionError(
                f"input {h}x{w} must be at least 4px and a multiple of {k} "
                f"({self.cfg.content_downsamples} downsamples)"
            )

    def encode_tensors(self, x: torch.Tensor, domain: int):
        self.check_input(x)
        return self.content_encoders[domain](x), self.style_encoders[domain](x)

    def encode_style(self, x: torch.Tensor, domain: int):
        self.check_input(x)
        return self.style_encoders[domain](x)

    def decode_tensors(self, content: torch.Tensor, style: torch.Tensor, domain: int):
        cfg = self.cfg
        if content.dim() != 4 or content.shape[1] != cfg.content_channels:
            raise DimensionError(
                f"content must be (N, {cfg.content_channels}, h, w), got {tuple(content.shape)}"
            )
        if style.dim() != 2 or style.shape[1] != cfg.style_dim or style.shape[0] != content.shape[0]:
            raise DimensionError(f"style must be (N, {cfg.style_dim}), got {tuple(style.shape)}")
        return self.decoders[domain](content, style)


def as_batch(image, dtype=torch.float32) -> torch.Tensor:
    """Accept an ImageSample, a (3, H, W) or an (N, 3, H, W) array/tensor."""
    if isinstance(image, ImageSample):
        image = image.pixels
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.array(image, copy=True))
    if image.dim() == 3:
        image = image[None]
    return image.to(dtype)


def _domain(domain) -> DomainId:
    return domain if isinstance(domain, DomainId) else DomainId(str(domain), int(domain))


def encode(model: TranslationModel, image, domain, granularity=Granularity.GLOBAL):
    d = _domain(domain)
    c, s = model.encode_tensors(as_batch(image, model.dtype), d.index)
    return ContentCode(c, Granularity(granularity), d), StyleCode(s, Granularity(granularity), d)


def decode(model: TranslationModel, content: ContentCode, style: StyleCode, domain) -> torch.Tensor:
    s = style.vector
    if s.dim() == 1:
        s = s[None].expand(content.features.shape[0], -1)
    return model.decode_tensors(content.features, s, _domain(domain).index)


def discriminate(model: TranslationModel, image, domain, granularity=Granularity.GLOBAL):
    return model.discriminator(_domain(domain).index, Granularity(granularity))(as_batch(image, model.dtype))
