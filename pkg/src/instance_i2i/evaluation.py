"""Translation metrics: perceptual diversity, IS, CIS, style export and ablations.

Feature extractors and domain classifiers are pluggable; the defaults are a
fixed-seed random convolutional stack and a small CNN trained on domain
labels, both adequate for toy-scale corpora only.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .association import build_style_bank
from .data_model import ImageSample
from .datasets import crop_instances, hue_offset, mean_background_hue
from .networks import TranslationModel, as_batch
from .training import translate

PROB_TOL = 1e-4


# -- interfaces ---------------------------------------------------------------


@runtime_checkable
class FeatureExtractor(Protocol):
    extractor_id: str

    def features(self, image) -> np.ndarray: ...


@runtime_checkable
class DomainClassifier(Protocol):
    def predict_probs(self, images) -> np.ndarray: ...


class RandomConvExtractor(nn.Module):
    """Fixed random conv stack exposing one feature map per stage."""

    def __init__(self, seed: int = 0, channels: Sequence[int] = (16, 32, 32)):
        super().__init__()
        self.extractor_id = f"random-conv-{'-'.join(map(str, channels))}-seed{seed}"
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            dims = [3, *channels]
            self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, 2, 1) for a, b in zip(dims, dims[1:]))
        self.requires_grad_(False)
        self.double()

    @torch.no_grad()
    def stages(self, images) -> list[torch.Tensor]:
        x = as_batch(images, torch.float64)
        out = []
        for conv in self.convs:
            x = F.relu(conv(x))
            out.append(x)
        return out

    def features(self, image) -> np.ndarray:
        pooled = [F.adaptive_avg_pool2d(s, 4).flatten(1) for s in self.stages(image)]
        return torch.cat(pooled, 1)[0].numpy()


def _normalize_channels(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def _batch_distance(extractor, a, b) -> torch.Tensor:
    """Per-pair distances for aligned batches ``a`` and ``b``."""
    if tuple(a.shape[-3:]) != tuple(b.shape[-3:]):
        raise ValueError(f"image sizes differ: {tuple(a.shape[-3:])} vs {tuple(b.shape[-3:])}")
    if hasattr(extractor, "stages"):
        per_stage = []
        for fa, fb in zip(extractor.stages(a), extractor.stages(b)):
            fa, fb = _normalize_channels(fa.double()), _normalize_channels(fb.double())
            per_stage.append((fa - fb).pow(2).sum(dim=1).flatten(1).mean(dim=1))
        return torch.stack(per_stage).mean(dim=0)
    fa = torch.as_tensor(np.stack([extractor.features(x) for x in a]), dtype=torch.float64)
    fb = torch.as_tensor(np.stack([extractor.features(x) for x in b]), dtype=torch.float64)
    fa, fb = fa / (fa.norm(dim=1, keepdim=True) + 1e-10), fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
    return (fa - fb).pow(2).sum(dim=1)


def perceptual_distance(extractor, img_a, img_b) -> float:
    """LPIPS-style distance with unit weights.

    Features are unit-normalised across channels at every position, squared
    differences are summed over channels and averaged over positions, then
    averaged over stages.  Extractors without ``stages`` are treated as a
    single stage with one position.
    """
    a, b = as_batch(img_a, torch.float64), as_batch(img_b, torch.float64)
    return float(_batch_distance(extractor, a, b)[0])


# -- diversity ---------------------------------------------------------------


Translator = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def model_translator(model: TranslationModel, target_domain: int) -> Translator:
    def run(images, styles):
        return translate(model, images, target_domain, style=styles)

    run.style_dim = model.cfg.style_dim
    return run


def diversity_score(
    model,
    inputs,
    pairs_per_input: int = 19,
    extractor=None,
    seed: int = 0,
    n_inputs: int = 100,
    target_domain: int = 1,
    fixed_style: bool = False,
) -> float:
    """Mean distance between pairs of prior-styled translations of each input.

    ``model`` is a TranslationModel or a translator ``f(images, styles)`` with a
    ``style_dim`` attribute.  With ``fixed_style`` both members of a pair share
    one style, which gives the no-diversity reference.
    """
    if len(inputs) < n_inputs:
        raise ValueError(f"need {n_inputs} inputs, got {len(inputs)}")
    extractor = extractor or RandomConvExtractor()
    run = model_translator(model, target_domain) if isinstance(model, TranslationModel) else model
    gen = torch.Generator().manual_seed(seed)
    scores = []
    for img in list(inputs)[:n_inputs]:
        x = as_batch(img, torch.float32)
        styles = torch.randn(2 * pairs_per_input, run.style_dim, generator=gen)
        if fixed_style:
            styles[pairs_per_input:] = styles[:pairs_per_input]
        outs = run(x.expand(2 * pairs_per_input, -1, -1, -1), styles)
        d = _batch_distance(extractor, outs[:pairs_per_input], outs[pairs_per_input:])
        scores.append(float(d.mean()))
    return float(np.mean(scores))


# -- inception scores ----------------------------------------------------------


def _check_rows(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ValueError(f"expected an (N, K) probability array, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and non-negative")
    bad = np.abs(p.sum(axis=1) - 1.0) > PROB_TOL
    if bad.any():
        raise ValueError(f"row {int(np.argmax(bad))} does not sum to 1")
    return p


def _mean_kl_to_marginal(p: np.ndarray) -> float:
    marginal = p.mean(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(terms.sum(axis=1).mean())


def inception_score(probs, splits: int = 1) -> float:
    """exp of the mean KL between each row and the row marginal, averaged over splits."""
    p = _check_rows(probs)
    if splits < 1 or splits > len(p):
        raise ValueError(f"splits must lie in [1, {len(p)}]")
    return float(np.mean([math.exp(_mean_kl_to_marginal(part)) for part in np.array_split(p, splits)]))


def conditional_inception_score(probs_by_input) -> float:
    """exp of the mean, over inputs, of the mean KL between each sample and that input's marginal."""
    groups = [_check_rows(g) for g in probs_by_input]
    if not groups:
        raise ValueError("need at least one input")
    for g in groups:
        if len(g) < 2:
            raise ValueError("need at least two samples per input")
    return float(math.exp(np.mean([_mean_kl_to_marginal(g) for g in groups])))


class SmallDomainClassifier(nn.Module):
    def __init__(self, n_classes: int = 2, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(2 * width, n_classes),
        )

    def forward(self, x):
        return self.net(x)

    @torch.no_grad()
    def predict_probs(self, images) -> np.ndarray:
        return F.softmax(self(as_batch(images, torch.float32)), dim=1).double().numpy()


def train_domain_classifier(
    samples: Sequence[ImageSample], seed: int = 0, epochs: int = 30, lr: float = 3e-3
) -> SmallDomainClassifier:
    """Fit a SmallDomainClassifier to the samples' domain indices."""
    x = torch.stack([as_batch(s)[0] for s in samples])
    y = torch.tensor([s.domain.index for s in samples])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        clf = SmallDomainClassifier(n_classes=int(y.max()) + 1)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        for idx in torch.randperm(len(x), generator=gen).split(32):
            opt.zero_grad()
            F.cross_entropy(clf(x[idx]), y[idx]).backward()
            opt.step()
    clf.eval()
    return clf


def translation_probs(model, inputs, classifier, n_samples: int = 19, seed: int = 0,
                      target_domain: int = 1) -> np.ndarray:
    """(M, S, K) class probabilities of S prior-styled translations of each input."""
    gen = torch.Generator().manual_seed(seed)
    out = []
    for img in inputs:
        x = as_batch(img, model.dtype).expand(n_samples, -1, -1, -1)
        styles = torch.randn(n_samples, model.cfg.style_dim, generator=gen, dtype=model.dtype)
        out.append(classifier.predict_probs(translate(model, x, target_domain, style=styles)))
    return np.stack(out)


# -- style export ----------------------------------------------------------------


def export_style_codes(model: TranslationModel, samples: Sequence[ImageSample], out_path,
                       instance_size: int = 32, crops: Sequence[ImageSample] | None = None) -> list[list]:
    """Write one CSV row per style bank entry: key columns then the style vector."""
    if crops is None:
        crops = [c for s in samples for c in crop_instances(s, instance_size)]
    bank = build_style_bank(model, samples, crops)
    rows = []
    for key in bank.keys():
        vec = bank[key].vector.detach().double().numpy()
        rows.append([bank[key].domain.name, key.granularity.value, key.source_id, *vec.tolist()])
    header = ["domain", "granularity", "source_id"] + [f"s{i}" for i in range(model.cfg.style_dim)]
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r[:3] + [repr(float(v)) for v in r[3:]])
    return rows


# -- hue shift ----------------------------------------------------------------


def _circular_mean(hues) -> float:
    angles = 2 * np.pi * np.asarray(hues, dtype=np.float64)
    return math.atan2(np.sin(angles).mean(), np.cos(angles).mean()) / (2 * np.pi) % 1.0


def hue_shift(model: TranslationModel, source: Sequence[ImageSample], target: Sequence[ImageSample],
              seed: int = 0, target_domain: int = 1) -> dict:
    """How far translation moves the mean background hue toward the target corpus.

    ``shift`` is how much closer (in circular hue distance) the mean hue of the
    translations is to the target mean than the source mean was, so it stays
    well defined when the two palettes sit near opposite sides of the hue
    circle.  ``ratio`` divides it by the pooled within-domain standard
    deviation of real background hues.
    """
    hs = np.array([mean_background_hue(s.pixels, s.boxes) for s in source])
    ht = np.array([mean_background_hue(s.pixels, s.boxes) for s in target])
    ms, mt = _circular_mean(hs), _circular_mean(ht)
    gen = torch.Generator().manual_seed(seed)
    moved = []
    for s in source:
        out = translate(model, s, target_domain, generator=gen)[0].double().numpy()
        moved.append(mean_background_hue(out, s.boxes))
    mm = _circular_mean(moved)
    var_s = np.mean([hue_offset(h, ms) ** 2 for h in hs])
    var_t = np.mean([hue_offset(h, mt) ** 2 for h in ht])
    pooled = math.sqrt((var_s + var_t) / 2)
    shift = abs(hue_offset(ms, mt)) - abs(hue_offset(mm, mt))
    return {"source_hue": ms, "target_hue": mt, "translated_hue": mm, "shift": shift, "pooled_std": pooled,
            "ratio": shift / pooled if pooled > 0 else math.inf}


# -- reports --------------------------------------------------------------------


def metric_report(metric: str, value: float, n_inputs: int, n_pairs: int, seed: int,
                  extractor_id: str | None) -> dict:
    return {"metric": metric, "value": float(value), "n_inputs": int(n_inputs), "n_pairs": int(n_pairs),
            "seed": int(seed), "extractor_id": extractor_id}


METRIC_REPORT_SCHEMA = {
    "type": "object",
    "required": ["metric", "value", "n_inputs", "n_pairs", "seed", "extractor_id"],
    "properties": {
        "metric": {"type": "string"},
        "value": {"type": "number"},
        "n_inputs": {"type": "integer", "minimum": 0},
        "n_pairs": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "extractor_id": {"type": ["string", "null"]},
    },
}

ABLATION_SCHEMA = {
    "type": "object",
    "required": ["iterations", "seed", "settings"],
    "properties": {
        "iterations": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "settings": {
            "type": "array",
            "minItems": 2,
            "items": {
                "type": "object",
                "required": ["weight_sharing", "diversity", "inception_score",
                             "conditional_inception_score", "final_losses"],
                "properties": {
                    "weight_sharing": {"enum": ["shared_D", "separate_D"]},
                    "diversity": {"type": "number", "minimum": 0},
                    "inception_score": {"type": "number", "minimum": 1},
                    "conditional_inception_score": {"type": "number", "minimum": 1},
                    "final_losses": {"type": "object", "additionalProperties": {"type": "number"}},
                },
            },
        },
    },
}


def run_ablation(data_x, data_y, iterations: int = 200, seed: int = 0, n_inputs: int = 10,
                 pairs_per_input: int = 5, net_cfg=None, train_cfg=None, weights=None,
                 out_path=None) -> dict:
    """Train once per discriminator-sharing setting and compare diversity, IS and CIS."""
    import dataclasses

    import jsonschema

    from .networks import SEPARATE_D, SHARED_D, NetworkConfig
    from .training import TrainConfig, Trainer

    net_cfg = net_cfg or NetworkConfig()
    train_cfg = dataclasses.replace(train_cfg or TrainConfig(), seed=seed, iterations=iterations)
    classifier = train_domain_classifier(list(data_x) + list(data_y), seed=seed)
    extractor = RandomConvExtractor(seed=seed)
    inputs = list(data_x)[:n_inputs]
    settings = []
    for sharing in (SHARED_D, SEPARATE_D):
        trainer = Trainer(dataclasses.replace(net_cfg, weight_sharing=sharing), train_cfg, weights)
        reports = trainer.fit(data_x, data_y, iterations)
        probs = translation_probs(trainer.model, inputs, classifier, n_samples=max(pairs_per_input, 2), seed=seed)
        tail = reports[-min(len(reports), 50):]
        settings.append({
            "weight_sharing": sharing,
            "diversity": diversity_score(trainer.model, inputs, pairs_per_input, extractor, seed, n_inputs),
            "inception_score": inception_score(probs.reshape(-1, probs.shape[-1])),
            "conditional_inception_score": conditional_inception_score(probs),
            "final_losses": {k: float(np.median([getattr(r, k) for r in tail]))
                             for k in ("total", "global_self_recon", "gan_generator", "gan_discriminator")}
                            if tail else {},
        })
    report = {"iterations": iterations, "seed": seed, "settings": settings}
    jsonschema.validate(report, ABLATION_SCHEMA)
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=1, sort_keys=True))
    return report
