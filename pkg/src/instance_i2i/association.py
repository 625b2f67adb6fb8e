"""Style bank construction and coarse-to-fine content/style pairing.

A style may dress a content only when the style is at least as coarse as the
content (global < background < instance; half-scale ranks with global).  Every
pairing that swaps a style is followed by a back-translation step that
restores the original style and domain and is scored against the original.
"""

from __future__ import annotations

import enum
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch

from .data_model import DomainId, Granularity, ImageSample, StyleBank, StyleCode, StyleKey
from .networks import TranslationModel, as_batch


class AssociationError(AssertionError):
    """A plan paired a fine style with a coarser content."""


def association_allowed(style_g: Granularity, content_g: Granularity) -> bool:
    return Granularity(style_g).coarseness <= Granularity(content_g).coarseness


# -- style bank -------------------------------------------------------------


@torch.no_grad()
def build_style_bank(
    model: TranslationModel,
    samples: Sequence[ImageSample],
    crops: Sequence[ImageSample] = (),
    half_scales: Sequence[ImageSample] = (),
) -> StyleBank:
    """Style-encode every global image, its box-masked background and each crop.

    Crops and half-scale images carry their own ids; half-scale entries are
    only added when given.
    """
    bank = StyleBank()

    def put(px, domain: DomainId, gran: Granularity, source_id: str):
        s = model.encode_style(as_batch(px, model.dtype), domain.index)[0]
        bank.add(source_id, StyleCode(s, gran, domain))

    for smp in samples:
        put(smp.pixels, smp.domain, Granularity.GLOBAL, smp.id)
        put(smp.background_masked(), smp.domain, Granularity.BACKGROUND, smp.id)
    for crop in crops:
        put(crop.pixels, crop.domain, Granularity.INSTANCE, crop.id)
    for half in half_scales:
        put(half.pixels, half.domain, Granularity.HALF_SCALE, half.id)
    return bank


# -- plans ------------------------------------------------------------------


class StepKind(str, enum.Enum):
    SELF = "self"
    CROSS_DOMAIN = "cross_domain"
    CROSS_GRANULARITY = "cross_granularity"
    MULTI_SCALE = "multi_scale"
    BACK = "back"


@dataclass(frozen=True, order=True)
class UnitRef:
    """A content-bearing unit of a batch: a global image, a crop or a half-scale image."""

    domain: int
    granularity: Granularity
    source_id: str

    @property
    def own_style(self) -> StyleKey:
        return StyleKey(self.domain, self.granularity, self.source_id)


@dataclass(frozen=True)
class StyleRef:
    """Either a bank entry or the ``prior_index``-th standard-normal draw.

    Prior draws rank as global styles.
    """

    domain: int
    key: StyleKey | None = None
    prior_index: int = -1

    @property
    def granularity(self) -> Granularity:
        return Granularity.GLOBAL if self.key is None else self.key.granularity

    @property
    def is_prior(self) -> bool:
        return self.key is None


@dataclass(frozen=True)
class CycleStep:
    kind: StepKind
    content: UnitRef
    style: StyleRef
    decode_domain: int
    # image the decoded output is scored against (self and back steps)
    target: UnitRef | None = None
    # for back steps: the step whose re-encoded content is decoded here
    content_from: int | None = None

    @property
    def is_cross(self) -> bool:
        return self.kind not in (StepKind.SELF, StepKind.BACK)


@dataclass
class CyclePlan:
    steps: list[CycleStep] = field(default_factory=list)
    n_prior: int = 0

    def add(self, step: CycleStep) -> int:
        if not association_allowed(step.style.granularity, step.content.granularity):
            raise AssociationError(
                f"{step.style.granularity.value} style may not dress {step.content.granularity.value} content"
            )
        self.steps.append(step)
        return len(self.steps) - 1

    def validate(self) -> None:
        for i, st in enumerate(self.steps):
            if not association_allowed(st.style.granularity, st.content.granularity):
                raise AssociationError(f"step {i} pairs a finer style with a coarser content")
            if st.kind == StepKind.BACK:
                fwd = self.steps[st.content_from]
                if st.decode_domain != fwd.content.domain or st.target != fwd.content:
                    raise AssociationError(f"back step {i} does not restore step {st.content_from}")
        backs = {st.content_from for st in self.steps if st.kind == StepKind.BACK}
        for i, st in enumerate(self.steps):
            if st.is_cross and i not in backs:
                raise AssociationError(f"step {i} has no back-translation step")

    def of_kind(self, kind: StepKind) -> list[CycleStep]:
        return [s for s in self.steps if s.kind == kind]


@dataclass(frozen=True)
class BatchUnits:
    units: tuple[UnitRef, ...]
    # crop / half-scale source id -> id of the global image it came from
    parent: Mapping[str, str]

    @classmethod
    def from_samples(
        cls,
        samples: Iterable[ImageSample],
        crops: Iterable[ImageSample] = (),
        half_scales: Iterable[ImageSample] = (),
    ) -> BatchUnits:
        units, parent = [], {}
        for s in samples:
            units.append(UnitRef(s.domain.index, Granularity.GLOBAL, s.id))
        for c in crops:
            units.append(UnitRef(c.domain.index, Granularity.INSTANCE, c.id))
            parent[c.id] = c.id.split("#obj")[0]
        for h in half_scales:
            units.append(UnitRef(h.domain.index, Granularity.HALF_SCALE, h.id))
            parent[h.id] = h.id.split("@half")[0]
        return cls(tuple(units), parent)

    def bank_keys(self) -> list[StyleKey]:
        keys = [u.own_style for u in self.units]
        keys += [
            StyleKey(u.domain, Granularity.BACKGROUND, u.source_id)
            for u in self.units
            if u.granularity == Granularity.GLOBAL
        ]
        return sorted(keys)


def plan_cycles(
    bank: StyleBank | Iterable[StyleKey],
    batch: BatchUnits,
    rng: np.random.Generator,
    cross_domain: bool = True,
    cross_granularity: bool = True,
    multi_scale: bool = True,
) -> CyclePlan:
    """Self-reconstruction for every unit plus the enabled swap modes.

    Cross-domain swaps draw one style uniformly among the other domain's
    admissible bank entries and a fresh prior sample.  Cross-granularity swaps
    dress each crop with its parent image's global style.  Multi-scale swaps
    exchange styles between a half-scale image and its full-size original.
    """
    keys = bank.keys() if isinstance(bank, StyleBank) else sorted(bank)
    plan = CyclePlan()
    units = sorted(batch.units)

    def swap(kind: StepKind, content: UnitRef, style: StyleRef, decode_domain: int) -> None:
        i = plan.add(CycleStep(kind, content, style, decode_domain))
        plan.add(CycleStep(StepKind.BACK, content, StyleRef(content.domain, content.own_style),
                           content.domain, target=content, content_from=i))

    for u in units:
        plan.add(CycleStep(StepKind.SELF, u, StyleRef(u.domain, u.own_style), u.domain, target=u))

    for u in units:
        if cross_domain and u.granularity in (Granularity.GLOBAL, Granularity.INSTANCE):
            other = 1 - u.domain
            options = [k for k in keys if k.domain == other and association_allowed(k.granularity, u.granularity)]
            pick = int(rng.integers(len(options) + 1))
            if pick == len(options):
                style = StyleRef(other, prior_index=plan.n_prior)
                plan.n_prior += 1
            else:
                style = StyleRef(other, options[pick])
            swap(StepKind.CROSS_DOMAIN, u, style, other)

        if cross_granularity and u.granularity == Granularity.INSTANCE:
            parent = StyleKey(u.domain, Granularity.GLOBAL, batch.parent[u.source_id])
            swap(StepKind.CROSS_GRANULARITY, u, StyleRef(u.domain, parent), u.domain)

        if multi_scale and u.granularity == Granularity.HALF_SCALE:
            full = UnitRef(u.domain, Granularity.GLOBAL, batch.parent[u.source_id])
            swap(StepKind.MULTI_SCALE, u, StyleRef(u.domain, full.own_style), u.domain)
            swap(StepKind.MULTI_SCALE, full, StyleRef(u.domain, u.own_style), u.domain)

    return plan
