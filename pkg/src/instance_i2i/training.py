"""Alternating discriminator / generator optimisation, inference and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import pickle
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .association import BatchUnits, CyclePlan, StepKind, UnitRef, plan_cycles
from .data_model import Granularity, ImageSample, StyleCode, StyleKey
from .datasets import crop_instances, half_scale
from .losses import (
    LossReport,
    LossWeights,
    NonFiniteLossError,
    discriminator_loss,
    full_objective,
    generator_adv_loss,
    latent_target,
    recon_loss,
    term_name,
    weighted_total,
)
from .networks import NetworkConfig, TranslationModel, as_batch

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
META_FILE = "meta.json"
STATE_FILE = "state.pt"
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 1
    lr_gen: float = 1e-4
    lr_dis: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0
    image_size: int = 64
    instance_size: int = 32
    max_instances: int = 2
    cross_domain: bool = True
    cross_granularity: bool = True
    multi_scale: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.max_instances < 0:
            raise ValueError("train.iterations, batch_size and max_instances must be non-negative / positive")
        if self.lr_gen < 0 or self.lr_dis < 0:
            raise ValueError("learning rates must be >= 0")
        if self.dtype not in DTYPES:
            raise ValueError(f"train.dtype must be one of {sorted(DTYPES)}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- batches ----------------------------------------------------------------


@dataclass
class PreparedBatch:
    """Tensors for every unit of one iteration, grouped for batched passes."""

    units: BatchUnits
    images: dict[UnitRef, torch.Tensor]  # unit -> (3, H, W)
    backgrounds: dict[UnitRef, torch.Tensor]  # global unit -> box-masked (3, H, W)

    def reals(self, domain: int, granularity: Granularity) -> torch.Tensor | None:
        xs = [t for u, t in self.images.items() if u.domain == domain and u.granularity == granularity]
        return torch.stack(xs) if xs else None


def prepare_batch(
    samples: list[ImageSample],
    instance_size: int,
    max_instances: int,
    multi_scale: bool,
    rng: np.random.Generator,
    dtype=torch.float32,
) -> PreparedBatch:
    crops, halves = [], []
    images, backgrounds = {}, {}
    for s in samples:
        images[UnitRef(s.domain.index, Granularity.GLOBAL, s.id)] = as_batch(s, dtype)[0]
        backgrounds[UnitRef(s.domain.index, Granularity.GLOBAL, s.id)] = as_batch(s.background_masked(), dtype)[0]
        all_crops = crop_instances(s, instance_size)
        if len(all_crops) > max_instances:
            keep = sorted(rng.choice(len(all_crops), size=max_instances, replace=False))
            all_crops = [all_crops[i] for i in keep]
        crops += all_crops
        if multi_scale:
            halves.append(half_scale(s))
    for c in crops:
        images[UnitRef(c.domain.index, Granularity.INSTANCE, c.id)] = as_batch(c, dtype)[0]
    for h in halves:
        images[UnitRef(h.domain.index, Granularity.HALF_SCALE, h.id)] = as_batch(h, dtype)[0]
    return PreparedBatch(BatchUnits.from_samples(samples, crops, halves), images, backgrounds)


def _grouped(items, key):
    groups = defaultdict(list)
    for it in items:
        groups[key(it)].append(it)
    return sorted(groups.items(), key=lambda kv: kv[0])


class _Codes:
    """Content and style codes of a prepared batch, computed in batched passes."""

    def __init__(self, model: TranslationModel, batch: PreparedBatch):
        self.content: dict[UnitRef, torch.Tensor] = {}
        self.style: dict[StyleKey, torch.Tensor] = {}
        units = sorted(batch.images)
        for (d, _size), group in _grouped(units, lambda u: (u.domain, tuple(batch.images[u].shape))):
            c, s = model.encode_tensors(torch.stack([batch.images[u] for u in group]), d)
            for i, u in enumerate(group):
                self.content[u] = c[i : i + 1]
                self.style[u.own_style] = s[i : i + 1]
        bg = sorted(batch.backgrounds)
        for (d, _size), group in _grouped(bg, lambda u: (u.domain, tuple(batch.backgrounds[u].shape))):
            s = model.encode_style(torch.stack([batch.backgrounds[u] for u in group]), d)
            for i, u in enumerate(group):
                self.style[StyleKey(d, Granularity.BACKGROUND, u.source_id)] = s[i : i + 1]


def _resolve_style(codes: _Codes, ref, priors: torch.Tensor) -> torch.Tensor:
    return priors[ref.prior_index : ref.prior_index + 1] if ref.is_prior else codes.style[ref.key]


def _decode_steps(model, indices, contents, styles, plan):
    """Decode several steps at once, batching those sharing domain and size."""
    out = {}
    groups = _grouped(indices, lambda i: (plan.steps[i].decode_domain, tuple(contents[i].shape)))
    for (d, _shape), idx in groups:
        imgs = model.decode_tensors(torch.cat([contents[i] for i in idx]), torch.cat([styles[i] for i in idx]), d)
        for k, i in enumerate(idx):
            out[i] = imgs[k : k + 1]
    return out


def _forward_fakes(model, batch, plan, codes, priors):
    """Outputs of every forward (non-self, non-back) step."""
    fwd = [i for i, st in enumerate(plan.steps) if st.is_cross]
    contents = {i: codes.content[plan.steps[i].content] for i in fwd}
    styles = {i: _resolve_style(codes, plan.steps[i].style, priors) for i in fwd}
    return _decode_steps(model, fwd, contents, styles, plan)


def _disc_inputs(plan, fakes):
    """Cross-domain fakes grouped by the discriminator that judges them."""
    groups = defaultdict(list)
    for i, img in sorted(fakes.items()):
        st = plan.steps[i]
        if st.kind == StepKind.CROSS_DOMAIN:
            groups[(st.decode_domain, st.content.granularity)].append(img)
    return {k: torch.cat(v) for k, v in sorted(groups.items())}


def discriminator_objective(model, batch: PreparedBatch, plan: CyclePlan, priors) -> torch.Tensor:
    with torch.no_grad():
        codes = _Codes(model, batch)
        fakes = _disc_inputs(plan, _forward_fakes(model, batch, plan, codes, priors))
    total = None
    for (d, gran), fake in fakes.items():
        real = batch.reals(d, gran)
        if real is None:
            continue
        loss = discriminator_loss(model.discriminator(d, gran), real, fake)
        total = loss if total is None else total + loss
    if total is None:
        total = torch.zeros((), dtype=model.dtype)
    return total


def generator_terms(model, batch: PreparedBatch, plan: CyclePlan, priors):
    """Every objective term for one plan as differentiable scalars.

    Returns ``(terms, extras)`` where ``extras`` holds the cycle and global
    self-reconstruction subtotals used for reporting.
    """
    codes = _Codes(model, batch)
    steps = plan.steps
    per_term = defaultdict(list)
    self_global = defaultdict(list)
    cycle = []

    # round 1: self reconstruction and forward swaps
    first = [i for i, st in enumerate(steps) if st.kind != StepKind.BACK]
    contents = {i: codes.content[steps[i].content] for i in first}
    styles = {i: _resolve_style(codes, steps[i].style, priors) for i in first}
    outs = _decode_steps(model, first, contents, styles, plan)

    for i in first:
        st = steps[i]
        if st.kind == StepKind.SELF:
            loss = recon_loss(outs[i], batch.images[st.target][None])
            per_term[term_name("image", st.target.granularity, st.target.domain)].append(loss)
            if st.target.granularity == Granularity.GLOBAL:
                self_global[st.target.domain].append(loss)

    # round 2: re-encode swapped outputs
    cross = [i for i in first if steps[i].is_cross]
    re_content = {}
    for (d, _shape), idx in _grouped(cross, lambda i: (steps[i].decode_domain, tuple(outs[i].shape))):
        c_hat, s_hat = model.encode_tensors(torch.cat([outs[i] for i in idx]), d)
        for k, i in enumerate(idx):
            st = steps[i]
            re_content[i] = c_hat[k : k + 1]
            per_term[term_name("content", st.content.granularity, st.content.domain)].append(
                recon_loss(c_hat[k : k + 1], latent_target(contents[i]))
            )
            per_term[term_name("style", st.content.granularity, st.decode_domain)].append(
                recon_loss(s_hat[k : k + 1], latent_target(styles[i]))
            )

    # round 3: translate back with the original style and compare to the original
    back = [i for i, st in enumerate(steps) if st.kind == StepKind.BACK]
    b_contents = {i: re_content[steps[i].content_from] for i in back}
    b_styles = {i: _resolve_style(codes, steps[i].style, priors) for i in back}
    b_outs = _decode_steps(model, back, b_contents, b_styles, plan)
    for i in back:
        st = steps[i]
        loss = recon_loss(b_outs[i], batch.images[st.target][None])
        per_term[term_name("image", st.target.granularity, st.target.domain)].append(loss)
        cycle.append(loss)

    # adversarial terms on cross-domain outputs
    for (d, gran), fake in _disc_inputs(plan, {i: outs[i] for i in cross}).items():
        per_term[term_name("adv", gran, d)].append(generator_adv_loss(model.discriminator(d, gran), fake))

    terms = {name: torch.stack(vals).mean() for name, vals in per_term.items()}
    zero = torch.zeros((), dtype=model.dtype)
    extras = {
        "cycle": torch.stack(cycle).mean() if cycle else zero,
        "global_self_recon": sum((torch.stack(v).mean() for v in self_global.values()), zero),
    }
    return terms, extras


# -- the trainer ------------------------------------------------------------


class Trainer:
    """Owns the model, both optimisers and every random stream of a run.

    The numpy generator drives batch sampling and cycle planning; the torch
    generator draws prior styles.  Both are checkpointed.
    """

    def __init__(self, net_cfg: NetworkConfig | None = None, train_cfg: TrainConfig | None = None,
                 weights: LossWeights | None = None):
        self.net_cfg = net_cfg or NetworkConfig()
        self.cfg = train_cfg or TrainConfig()
        self.weights = weights or LossWeights()
        seeds = np.random.SeedSequence(self.cfg.seed).generate_state(3)
        self.model = TranslationModel(self.net_cfg, seed=int(seeds[0]), dtype=DTYPES[self.cfg.dtype])
        betas = (self.cfg.beta1, self.cfg.beta2)
        self.opt_gen = torch.optim.Adam(list(self.model.generator_parameters()), lr=self.cfg.lr_gen,
                                        betas=betas, weight_decay=self.cfg.weight_decay)
        self.opt_dis = torch.optim.Adam(list(self.model.discriminator_parameters()), lr=self.cfg.lr_dis,
                                        betas=betas, weight_decay=self.cfg.weight_decay)
        self.rng = np.random.default_rng(int(seeds[1]))
        self.torch_gen = torch.Generator().manual_seed(int(seeds[2]))
        self.iteration = 0
        self.running: dict[str, float] = {}

    @property
    def dtype(self):
        return DTYPES[self.cfg.dtype]

    def sample_batch(self, data_x: list[ImageSample], data_y: list[ImageSample]):
        out = []
        for data in (data_x, data_y):
            idx = self.rng.choice(len(data), size=self.cfg.batch_size, replace=len(data) < self.cfg.batch_size)
            out.append([data[int(i)] for i in idx])
        return out[0], out[1]

    def plan(self, samples: list[ImageSample]) -> tuple[PreparedBatch, CyclePlan, torch.Tensor]:
        batch = prepare_batch(samples, self.cfg.instance_size, self.cfg.max_instances,
                              self.cfg.multi_scale, self.rng, self.dtype)
        plan = plan_cycles(batch.units.bank_keys(), batch.units, self.rng, self.cfg.cross_domain,
                           self.cfg.cross_granularity, self.cfg.multi_scale)
        priors = torch.randn(plan.n_prior, self.net_cfg.style_dim, generator=self.torch_gen, dtype=self.dtype)
        return batch, plan, priors

    def train_step(self, batch_x: list[ImageSample], batch_y: list[ImageSample]) -> LossReport:
        """One discriminator update followed by one encoder/decoder update."""
        samples = list(batch_x) + list(batch_y)
        batch, plan, priors = self.plan(samples)
        it = self.iteration

        self.opt_dis.zero_grad(set_to_none=True)
        d_loss = discriminator_objective(self.model, batch, plan, priors)
        if not torch.isfinite(d_loss):
            raise NonFiniteLossError("gan_discriminator", float(d_loss.detach()), it)
        if d_loss.requires_grad:
            d_loss.backward()
        self.opt_dis.step()

        self.opt_gen.zero_grad(set_to_none=True)
        terms, extras = generator_terms(self.model, batch, plan, priors)
        for name, v in terms.items():
            if not torch.isfinite(v):
                raise NonFiniteLossError(name, float(v.detach()), it)
        total = weighted_total(terms, self.weights)
        total.backward()
        self.opt_gen.step()

        try:
            report = full_objective(terms, self.weights, gan_discriminator=d_loss, **extras)
        except NonFiniteLossError as e:
            raise NonFiniteLossError(e.term, e.value, it) from None
        self.iteration += 1
        for k in ("total", "global_self_recon", "gan_discriminator"):
            v = getattr(report, k)
            self.running[k] = v if k not in self.running else 0.99 * self.running[k] + 0.01 * v
        return report

    def fit(self, data_x, data_y, iterations: int | None = None, on_step=None) -> list[LossReport]:
        n = self.cfg.iterations if iterations is None else iterations
        reports = []
        for _ in range(n):
            report = self.train_step(*self.sample_batch(data_x, data_y))
            reports.append(report)
            if on_step is not None:
                on_step(self, report)
        return reports

    # -- state --------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "opt_gen": self.opt_gen.state_dict(),
            "opt_dis": self.opt_dis.state_dict(),
            "rng": self.rng.bit_generator.state,
            "torch_rng": self.torch_gen.get_state(),
            "iteration": self.iteration,
            "running": dict(self.running),
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.opt_gen.load_state_dict(state["opt_gen"])
        self.opt_dis.load_state_dict(state["opt_dis"])
        self.rng.bit_generator.state = state["rng"]
        self.torch_gen.set_state(state["torch_rng"])
        self.iteration = int(state["iteration"])
        self.running = dict(state["running"])


# -- inference ----------------------------------------------------------------


@torch.no_grad()
def translate(model: TranslationModel, image, target_domain: int, style=None, generator=None) -> torch.Tensor:
    """Global-branch translation into ``target_domain``; needs no boxes.

    ``style`` may be a StyleCode, a (style_dim,) / (N, style_dim) tensor, or
    None to draw from the standard-normal prior with ``generator``.
    """
    x = as_batch(image, model.dtype)
    target = int(getattr(target_domain, "index", target_domain))
    model.check_input(x)
    content = model.content_encoders[1 - target](x)
    if style is None:
        style = torch.randn(x.shape[0], model.cfg.style_dim, generator=generator, dtype=model.dtype)
    elif isinstance(style, StyleCode):
        style = style.vector
    style = torch.as_tensor(style, dtype=model.dtype)
    if style.dim() == 1:
        style = style[None].expand(x.shape[0], -1)
    return model.decode_tensors(content, style, target)


# -- checkpoints --------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


class CheckpointMissingError(CheckpointError, FileNotFoundError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _config_from(cls, d: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names})


def save_checkpoint(trainer: Trainer, path, run_config: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(trainer.state_dict(), buf)
    (path / STATE_FILE).write_bytes(buf.getvalue())
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": trainer.iteration,
        "seed": trainer.cfg.seed,
        "network": trainer.net_cfg.to_dict(),
        "train": trainer.cfg.to_dict(),
        "loss": trainer.weights.to_dict(),
        "run_config": run_config,
    }
    (path / META_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def read_meta(path) -> dict:
    path = Path(path)
    meta_path = path / META_FILE
    if not path.is_dir() or not meta_path.is_file() or not (path / STATE_FILE).is_file():
        raise CheckpointMissingError(f"no checkpoint at {path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint metadata {meta_path}: {e}") from None
    version = meta.get("format_version") if isinstance(meta, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version!r} is not supported (expected {CHECKPOINT_VERSION})"
        )
    return meta


def load_checkpoint(path) -> Trainer:
    path = Path(path)
    meta = read_meta(path)
    try:
        trainer = Trainer(
            _config_from(NetworkConfig, meta["network"]),
            _config_from(TrainConfig, meta["train"]),
            _config_from(LossWeights, meta["loss"]),
        )
        state = torch.load(path / STATE_FILE, map_location="cpu", weights_only=False)
        trainer.load_state_dict(state)
    except (KeyError, TypeError, ValueError, RuntimeError, EOFError, AttributeError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"corrupt checkpoint at {path}: {e}") from e
    return trainer


def load_model(path) -> TranslationModel:
    return load_checkpoint(path).model
