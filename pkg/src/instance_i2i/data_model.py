"""Core value types shared by the rest of the package."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class Category(str, enum.Enum):
    CAR = "car"
    PERSON = "person"
    TRAFFIC_SIGN = "traffic_sign"
    SYNTHETIC = "synthetic"


class Granularity(str, enum.Enum):
    """Spatial granularity a code was extracted from.

    Coarseness ranks: global < background < instance.  ``half_scale`` ranks
    with ``global`` so the two are interchangeable when pairing styles.
    """

    GLOBAL = "global"
    BACKGROUND = "background"
    INSTANCE = "instance"
    HALF_SCALE = "half_scale"

    @property
    def coarseness(self) -> int:
        return _COARSENESS[self]

    def coarser_than(self, other: Granularity) -> bool:
        return self.coarseness < other.coarseness


_COARSENESS = {
    Granularity.GLOBAL: 0,
    Granularity.HALF_SCALE: 0,
    Granularity.BACKGROUND: 1,
    Granularity.INSTANCE: 2,
}


@dataclass(frozen=True)
class DomainId:
    name: str
    index: int

    def __post_init__(self):
        if self.index not in (0, 1):
            raise ValueError(f"domain index must be 0 or 1, got {self.index}")


def make_domains(name_x: str, name_y: str) -> tuple[DomainId, DomainId]:
    if name_x == name_y:
        raise ValueError(f"domain names must be unique, got {name_x!r} twice")
    return DomainId(name_x, 0), DomainId(name_y, 1)


@dataclass(frozen=True)
class InstanceBox:
    x: int
    y: int
    w: int
    h: int
    category: Category = Category.SYNTHETIC

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, height: int, width: int) -> bool:
        return (
            self.x >= 0
            and self.y >= 0
            and self.w >= 1
            and self.h >= 1
            and self.x + self.w <= width
            and self.y + self.h <= height
        )

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True, eq=False)
class ImageSample:
    """A 3xHxW image in [-1, 1] with its domain and instance boxes.

    The constructor does not validate; use :func:`validate_sample`.  The pixel
    array is copied and made read-only so samples can be shared freely.
    """

    pixels: np.ndarray
    domain: DomainId
    boxes: tuple[InstanceBox, ...] = ()
    id: str = ""

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float32, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[-2])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[-1])

    def replace(self, **changes: Any) -> ImageSample:
        kwargs = dict(pixels=self.pixels, domain=self.domain, boxes=self.boxes, id=self.id)
        kwargs.update(changes)
        return ImageSample(**kwargs)

    def background_masked(self) -> np.ndarray:
        """Pixels with every box interior set to zero."""
        out = np.array(self.pixels, copy=True)
        for b in self.boxes:
            out[:, b.y : b.y + b.h, b.x : b.x + b.w] = 0.0
        return out


@dataclass(frozen=True, eq=False)
class ContentCode:
    features: Any  # tensor (N, C, h, w)
    granularity: Granularity
    domain: DomainId


@dataclass(frozen=True, eq=False)
class StyleCode:
    vector: Any  # tensor (style_dim,) or (N, style_dim)
    granularity: Granularity
    domain: DomainId


@dataclass(frozen=True, order=True)
class StyleKey:
    domain: int
    granularity: Granularity
    source_id: str


@dataclass
class StyleBank:
    entries: dict[StyleKey, StyleCode] = field(default_factory=dict)

    def add(self, source_id: str, code: StyleCode) -> StyleKey:
        key = StyleKey(code.domain.index, code.granularity, source_id)
        self.entries[key] = code
        return key

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, key: StyleKey) -> StyleCode:
        return self.entries[key]

    def __contains__(self, key: object) -> bool:
        return key in self.entries

    def keys(self, domain: int | None = None, granularity: Granularity | None = None) -> list[StyleKey]:
        return sorted(
            k
            for k in self.entries
            if (domain is None or k.domain == domain)
            and (granularity is None or k.granularity == granularity)
        )

    def check(self) -> list[str]:
        problems = []
        for k, code in self.entries.items():
            if k.domain != code.domain.index or k.granularity != code.granularity:
                problems.append(f"bank entry {k} does not match its code's fields")
        return problems


def validate_sample(sample: ImageSample) -> list[str]:
    """Return a description of every broken invariant; empty when valid."""
    problems: list[str] = []
    px = sample.pixels
    if px.ndim != 3 or px.shape[0] != 3:
        problems.append(f"pixels must have shape (3, H, W), got {px.shape}")
        return problems
    if not np.all(np.isfinite(px)):
        problems.append("pixels contain non-finite values")
    elif px.size and (px.min() < -1.0 or px.max() > 1.0):
        problems.append("pixels out of range")
    if not isinstance(sample.domain, DomainId):
        problems.append("domain is not a DomainId")
    h, w = px.shape[1:]
    for i, b in enumerate(sample.boxes):
        if b.w < 1 or b.h < 1:
            problems.append(f"box {i} has non-positive size")
        elif b.x < 0 or b.y < 0:
            problems.append(f"box {i} has negative origin")
        elif not b.inside(h, w):
            problems.append(f"box {i} exceeds image bounds")
        try:
            Category(b.category)
        except ValueError:
            problems.append(f"box {i} has unknown category {b.category!r}")
    return problems
