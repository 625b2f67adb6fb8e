"""Reconstruction, latent, cycle and least-squares adversarial losses.

The full objective has six weighted reconstruction groups, each summed over
the two domains, plus four adversarial terms::

    total = l_g  * (image_g_X   + image_g_Y)
          + l_cg * (content_g_X + content_g_Y)
          + l_sg * (style_g_X   + style_g_Y)
          + l_o  * (image_o_X   + image_o_Y)
          + l_co * (content_o_X + content_o_Y)
          + l_so * (style_o_X   + style_o_Y)
          + gan_weight * (adv_g_X + adv_g_Y + adv_o_X + adv_o_Y)

``image_*`` groups hold both self-reconstruction and cycle terms of the
matching granularity.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .association import AssociationError, association_allowed
from .data_model import ContentCode, DomainId, Granularity, StyleCode
from .networks import TranslationModel, decode

DOMAIN_TAGS = ("X", "Y")
LEVELS = ("g", "o")
RECON_KINDS = ("image", "content", "style")
RECON_TERMS = tuple(f"{k}_{lv}_{d}" for lv in LEVELS for k in RECON_KINDS for d in DOMAIN_TAGS)
ADV_TERMS = tuple(f"adv_{lv}_{d}" for lv in LEVELS for d in DOMAIN_TAGS)
TERM_NAMES = RECON_TERMS + ADV_TERMS


class NonFiniteLossError(ArithmeticError):
    def __init__(self, term: str, value, iteration: int | None = None):
        self.term, self.value, self.iteration = term, value, iteration
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(f"loss term {term!r} is not finite ({value}){where}")


@dataclass(frozen=True)
class LossWeights:
    lambda_g: float = 10.0
    lambda_cg: float = 1.0
    lambda_sg: float = 1.0
    lambda_o: float = 10.0
    lambda_co: float = 1.0
    lambda_so: float = 1.0
    gan_weight: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss.{k} must be >= 0, got {v}")

    def for_term(self, name: str) -> float:
        if name.startswith("adv_"):
            return self.gan_weight
        kind, level, _ = name.split("_")
        suffix = {"image": "", "content": "c", "style": "s"}[kind]
        return getattr(self, f"lambda_{suffix}{level}")

    def to_dict(self) -> dict:
        return asdict(self)


def level_of(granularity: Granularity) -> str:
    return "g" if Granularity(granularity) == Granularity.GLOBAL else "o"


def term_name(kind: str, granularity: Granularity, domain: int) -> str:
    return f"{kind}_{level_of(granularity)}_{DOMAIN_TAGS[domain]}"


def recon_loss(k_hat, k):
    """Mean absolute difference over all elements."""
    if tuple(k_hat.shape) != tuple(k.shape):
        raise ValueError(f"shape mismatch: {tuple(k_hat.shape)} vs {tuple(k.shape)}")
    if isinstance(k_hat, np.ndarray) and isinstance(k, np.ndarray):
        return float(np.mean(np.abs(k_hat - k)))
    return (k_hat - k).abs().mean()


def latent_target(code: torch.Tensor) -> torch.Tensor:
    """The code a re-encoded content or style is regressed onto, held fixed.

    Letting gradient reach the encoders through the target rewards shrinking
    every code toward one constant, which erases layout and appearance.
    """
    return code.detach()


def latent_recon_terms(model: TranslationModel, content: ContentCode, style: StyleCode, decode_domain):
    """Decode ``content`` with ``style``, re-encode, and score both codes.

    Returns ``(content_hat, style_hat, (content_loss, style_loss))``.
    """
    if not association_allowed(style.granularity, content.granularity):
        raise AssociationError(
            f"{style.granularity.value} style may not dress {content.granularity.value} content"
        )
    dom = decode_domain if isinstance(decode_domain, DomainId) else DomainId(str(decode_domain), int(decode_domain))
    img = decode(model, content, style, dom)
    c_hat, s_hat = model.encode_tensors(img, dom.index)
    s = style.vector if style.vector.dim() == 2 else style.vector[None].expand_as(s_hat)
    c_out = ContentCode(c_hat, content.granularity, dom)
    s_out = StyleCode(s_hat, style.granularity, dom)
    return c_out, s_out, (recon_loss(c_hat, latent_target(content.features)), recon_loss(s_hat, latent_target(s)))


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradients from reaching ``module``'s parameters."""
    params = list(module.parameters())
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


def discriminator_loss(disc: nn.Module, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Least-squares critic loss averaged over scales; ``fake`` is detached."""
    outs_real, outs_fake = disc(real), disc(fake.detach())
    per_scale = [((r - 1) ** 2).mean() + (f**2).mean() for r, f in zip(outs_real, outs_fake)]
    return torch.stack(per_scale).mean()


def generator_adv_loss(disc: nn.Module, fake: torch.Tensor) -> torch.Tensor:
    """Least-squares generator loss; ``disc`` receives no gradient."""
    with frozen(disc):
        outs = disc(fake)
    return torch.stack([((f - 1) ** 2).mean() for f in outs]).mean()


def gan_losses(model: TranslationModel, real, fake, domain, granularity=Granularity.GLOBAL):
    """``(d_loss, g_loss)`` for the discriminator serving ``(domain, granularity)``."""
    d = int(getattr(domain, "index", domain))
    disc = model.discriminator(d, Granularity(granularity))
    return discriminator_loss(disc, real, fake), generator_adv_loss(disc, fake)


# -- the full objective -------------------------------------------------------


def weighted_total(terms, weights: LossWeights):
    """Weighted sum of the named terms; works on floats or tensors."""
    total = 0.0
    for name in TERM_NAMES:
        if name in terms:
            total = total + weights.for_term(name) * terms[name]
    return total


def _value(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


@dataclass
class LossReport:
    global_recon: float
    instance_recon: float
    content_recon: float
    style_recon: float
    cycle: float
    gan_generator: float
    gan_discriminator: float
    total: float
    global_self_recon: float = 0.0
    terms: dict[str, float] = field(default_factory=dict)

    def weighted_total(self, weights: LossWeights) -> float:
        return weighted_total(self.terms, weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update({f"term.{k}": v for k, v in d.pop("terms").items()})
        return d


def full_objective(
    terms,
    weights: LossWeights,
    gan_discriminator=0.0,
    cycle=0.0,
    global_self_recon=0.0,
) -> LossReport:
    """Summarise the named terms (see module docstring) into a report.

    Missing terms count as zero.  Raises NonFiniteLossError naming the first
    non-finite input.
    """
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise KeyError(f"unknown loss terms: {sorted(unknown)}")
    vals = {n: _value(terms.get(n, 0.0)) for n in TERM_NAMES}
    extras = {"gan_discriminator": _value(gan_discriminator), "cycle": _value(cycle),
              "global_self_recon": _value(global_self_recon)}
    for name, v in {**vals, **extras}.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)

    def group(kind, level):
        return sum(vals[f"{kind}_{level}_{d}"] for d in DOMAIN_TAGS)

    return LossReport(
        global_recon=group("image", "g"),
        instance_recon=group("image", "o"),
        content_recon=group("content", "g") + group("content", "o"),
        style_recon=group("style", "g") + group("style", "o"),
        cycle=extras["cycle"],
        gan_generator=sum(vals[n] for n in ADV_TERMS),
        gan_discriminator=extras["gan_discriminator"],
        total=weighted_total(vals, weights),
        global_self_recon=extras["global_self_recon"],
        terms=vals,
    )
