"""Annotated corpora: manifest I/O, splits, geometric ops and a synthetic toy corpus.

Annotation format (one JSON document per corpus)::

    {
      "domains": ["sunny", "night"],
      "images": [{"id": "a", "file": "a.png", "width": 64, "height": 64, "domain": "sunny"}],
      "annotations": [{"image_id": "a", "bbox": [x, y, w, h], "category": "car"}]
    }

``file`` is relative to the directory holding the JSON document.  Images are
8-bit RGB and are mapped to [-1, 1] on load.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data_model import Category, DomainId, ImageSample, InstanceBox

ANNOTATION_FILE = "annotations.json"


class ManifestError(ValueError):
    """Malformed annotation document."""


class MissingFileError(FileNotFoundError):
    """An image referenced by a manifest does not exist."""


@dataclass(frozen=True)
class ImageRecord:
    id: str
    file: str | None
    width: int
    height: int
    domain: str
    boxes: tuple[InstanceBox, ...] = ()


@dataclass
class DatasetManifest:
    root: Path | None
    domains: tuple[str, ...]
    records: tuple[ImageRecord, ...]
    split_ratio: float = 0.85
    seed: int = 0
    # in-memory pixels for corpora that were never written to disk
    pixels: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ManifestError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def record(self, image_id: str) -> ImageRecord:
        for r in self.records:
            if r.id == image_id:
                return r
        raise KeyError(image_id)

    def domain_id(self, name: str, order: tuple[str, str] | None = None) -> DomainId:
        """``order`` names the two active domains; defaults to the first two listed."""
        order = tuple(order or self.domains[:2])
        if name not in order:
            raise ValueError(f"domain {name!r} is not one of the active domains {order}")
        return DomainId(name, order.index(name))

    def load(self, image_id: str, domain_order: tuple[str, str] | None = None) -> ImageSample:
        rec = self.record(image_id)
        if image_id in self.pixels:
            px = self.pixels[image_id]
        else:
            px = read_image(self.root / rec.file)
        return ImageSample(px, self.domain_id(rec.domain, domain_order), rec.boxes, rec.id)

    def samples(self, domain: str | None = None, ids=None, domain_order=None) -> list[ImageSample]:
        wanted = None if ids is None else set(ids)
        return [
            self.load(r.id, domain_order)
            for r in self.records
            if (domain is None or r.domain == domain) and (wanted is None or r.id in wanted)
        ]


def read_image(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing image file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return (arr.transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def to_uint8(pixels) -> np.ndarray:
    """[-1, 1] CHW floats to HWC uint8 with round-half-even."""
    arr = np.asarray(pixels, dtype=np.float64)
    arr = np.clip((arr + 1.0) * 127.5, 0, 255)
    return np.rint(arr).astype(np.uint8).transpose(1, 2, 0)


def write_image(pixels, path: Path) -> None:
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG")


def _parse_box(ann, where: str) -> InstanceBox:
    bbox = ann.get("bbox")
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise ManifestError(f"{where}.bbox: expected [x, y, w, h], got {bbox!r}")
    if not all(isinstance(v, (int, float)) and float(v).is_integer() for v in bbox):
        raise ManifestError(f"{where}.bbox: coordinates must be integers, got {bbox!r}")
    x, y, w, h = (int(v) for v in bbox)
    if w < 1:
        raise ManifestError(f"{where}.bbox: non-positive width {w}")
    if h < 1:
        raise ManifestError(f"{where}.bbox: non-positive height {h}")
    if x < 0 or y < 0:
        raise ManifestError(f"{where}.bbox: negative origin ({x}, {y})")
    try:
        cat = Category(ann.get("category", "synthetic"))
    except ValueError:
        raise ManifestError(f"{where}.category: unknown category {ann.get('category')!r}") from None
    return InstanceBox(x, y, w, h, cat)


def load_manifest(path, split_ratio: float = 0.85, seed: int = 0) -> DatasetManifest:
    """Parse and cross-check an annotation document.

    ``path`` may be the JSON file or the directory containing ``annotations.json``.
    """
    path = Path(path)
    if path.is_dir():
        path = path / ANNOTATION_FILE
    if not path.is_file():
        raise MissingFileError(f"missing annotation file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top level must be an object")
    images = doc.get("images")
    if not isinstance(images, list):
        raise ManifestError(f"{path}: 'images' must be a list")
    annotations = doc.get("annotations", [])
    if not isinstance(annotations, list):
        raise ManifestError(f"{path}: 'annotations' must be a list")

    root = path.parent
    seen: dict[str, dict] = {}
    for i, img in enumerate(images):
        where = f"images[{i}]"
        if not isinstance(img, dict):
            raise ManifestError(f"{where}: must be an object")
        for key in ("id", "file", "width", "height", "domain"):
            if key not in img:
                raise ManifestError(f"{where}.{key}: missing field")
        if img["id"] in seen:
            raise ManifestError(f"{where}.id: duplicate id {img['id']!r}")
        for key in ("width", "height"):
            if not isinstance(img[key], int) or img[key] < 1:
                raise ManifestError(f"{where}.{key}: must be a positive integer")
        if not (root / img["file"]).is_file():
            raise MissingFileError(f"{where}: missing image file {root / img['file']}")
        seen[str(img["id"])] = img

    boxes: dict[str, list[InstanceBox]] = {k: [] for k in seen}
    for j, ann in enumerate(annotations):
        where = f"annotations[{j}]"
        if not isinstance(ann, dict):
            raise ManifestError(f"{where}: must be an object")
        image_id = str(ann.get("image_id"))
        if image_id not in seen:
            raise MissingFileError(f"{where}.image_id: references unknown image {image_id!r}")
        box = _parse_box(ann, where)
        img = seen[image_id]
        if not box.inside(img["height"], img["width"]):
            raise ManifestError(f"{where}.bbox: box {box.as_list()} exceeds image bounds")
        boxes[image_id].append(box)

    domains = doc.get("domains") or sorted({str(img["domain"]) for img in seen.values()})
    records = tuple(
        ImageRecord(k, v["file"], v["width"], v["height"], str(v["domain"]), tuple(boxes[k]))
        for k, v in seen.items()
    )
    for r in records:
        if r.domain not in domains:
            raise ManifestError(f"image {r.id!r}.domain: {r.domain!r} not listed in 'domains'")
    return DatasetManifest(root, tuple(domains), records, split_ratio, seed)


def save_manifest(manifest: DatasetManifest, directory) -> Path:
    """Write images and ``annotations.json`` under ``directory``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for rec in manifest.records:
        sample = manifest.load(rec.id)
        fname = f"images/{rec.id}.png"
        write_image(sample.pixels, directory / fname)
        images.append(dict(id=rec.id, file=fname, width=rec.width, height=rec.height, domain=rec.domain))
        for b in rec.boxes:
            annotations.append(dict(image_id=rec.id, bbox=b.as_list(), category=Category(b.category).value))
    doc = dict(domains=list(manifest.domains), images=images, annotations=annotations)
    out = directory / ANNOTATION_FILE
    out.write_text(json.dumps(doc, indent=1))
    return out


def merge_manifests(*manifests: DatasetManifest) -> DatasetManifest:
    domains: list[str] = []
    records: list[ImageRecord] = []
    pixels: dict[str, np.ndarray] = {}
    for m in manifests:
        domains += [d for d in m.domains if d not in domains]
        records += m.records
        for r in m.records:
            pixels[r.id] = m.load(r.id).pixels
    first = manifests[0]
    return DatasetManifest(None, tuple(domains), tuple(records), first.split_ratio, first.seed, pixels)


def split(manifest: DatasetManifest, seed: int | None = None) -> tuple[list[str], list[str]]:
    """Shuffle ids with ``seed`` and cut at round-half-up(ratio * N)."""
    seed = manifest.seed if seed is None else seed
    ids = sorted(manifest.ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(math.floor(manifest.split_ratio * len(ids) + 0.5))
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


# -- geometry ---------------------------------------------------------------


def _resize(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    if pixels.shape[1:] == (height, width):
        return np.array(pixels, copy=True)
    t = torch.from_numpy(np.array(pixels, dtype=np.float32, copy=True))[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return out[0].numpy()


def _scale_box(b: InstanceBox, sx: float, sy: float, height: int, width: int) -> InstanceBox:
    x0 = min(max(int(round(b.x * sx)), 0), width - 1)
    y0 = min(max(int(round(b.y * sy)), 0), height - 1)
    x1 = min(max(int(round((b.x + b.w) * sx)), x0 + 1), width)
    y1 = min(max(int(round((b.y + b.h) * sy)), y0 + 1), height)
    return InstanceBox(x0, y0, x1 - x0, y1 - y0, b.category)


def crop_instances(sample: ImageSample, out_size: int) -> list[ImageSample]:
    """One ``out_size`` square crop per box, bilinearly resized, in box order."""
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    crops = []
    for k, b in enumerate(sample.boxes):
        region = sample.pixels[:, b.y : b.y + b.h, b.x : b.x + b.w]
        crops.append(ImageSample(_resize(region, out_size, out_size), sample.domain, (), f"{sample.id}#obj{k}"))
    return crops


def resize_short_side(sample: ImageSample, target: int) -> ImageSample:
    if target < 1:
        raise ValueError("target must be >= 1")
    h, w = sample.height, sample.width
    scale = target / min(h, w)
    if h <= w:
        nh, nw = target, int(round(w * scale))
    else:
        nh, nw = int(round(h * scale)), target
    if (nh, nw) == (h, w):
        return sample
    boxes = tuple(_scale_box(b, nw / w, nh / h, nh, nw) for b in sample.boxes)
    return sample.replace(pixels=_resize(sample.pixels, nh, nw), boxes=boxes)


MIN_KEPT_FRACTION = 0.25


def random_crop(sample: ImageSample, size: int, rng: np.random.Generator) -> ImageSample:
    """``size`` square window; boxes keeping < 25% of their area are dropped."""
    h, w = sample.height, sample.width
    if h < size or w < size:
        raise ValueError(f"cannot crop {size}x{size} from a {h}x{w} image")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    boxes = []
    for b in sample.boxes:
        x0, y0 = max(b.x, left), max(b.y, top)
        x1, y1 = min(b.x + b.w, left + size), min(b.y + b.h, top + size)
        if x1 <= x0 or y1 <= y0:
            continue
        if (x1 - x0) * (y1 - y0) < MIN_KEPT_FRACTION * b.area:
            continue
        boxes.append(InstanceBox(x0 - left, y0 - top, x1 - x0, y1 - y0, b.category))
    px = sample.pixels[:, top : top + size, left : left + size]
    return sample.replace(pixels=px, boxes=tuple(boxes))


def half_scale(sample: ImageSample) -> ImageSample:
    h, w = sample.height // 2, sample.width // 2
    boxes = tuple(_scale_box(b, 0.5, 0.5, h, w) for b in sample.boxes)
    return sample.replace(pixels=_resize(sample.pixels, h, w), boxes=boxes, id=f"{sample.id}@half")


# -- synthetic corpus -------------------------------------------------------


@dataclass(frozen=True)
class DomainPalette:
    name: str
    background_hue: tuple[float, float]
    object_brightness: tuple[float, float]


DEFAULT_PALETTES = (
    DomainPalette("sunny", (0.08, 0.14), (0.75, 0.95)),
    DomainPalette("night", (0.58, 0.66), (0.30, 0.50)),
)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    image_size: int = 64
    n_images: int = 64
    n_objects: tuple[int, int] = (1, 3)
    object_size: tuple[int, int] = (10, 24)
    palettes: tuple[DomainPalette, DomainPalette] = DEFAULT_PALETTES
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_objects
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid n_objects range {self.n_objects}")
        if self.object_size[1] > self.image_size or self.object_size[0] < 1:
            raise ValueError("objects must fit inside the image")
        a, b = (p.background_hue for p in self.palettes)
        if a[0] < b[1] and b[0] < a[1]:
            raise ValueError("domain background hue ranges must be disjoint")


def _scene(spec: SyntheticSceneSpec, palette: DomainPalette, rng: np.random.Generator):
    s = spec.image_size
    # geometry first so both domains consume the rng identically
    n = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    boxes = []
    for _ in range(n):
        bw, bh = (int(v) for v in rng.integers(spec.object_size[0], spec.object_size[1] + 1, size=2))
        x, y = int(rng.integers(0, s - bw + 1)), int(rng.integers(0, s - bh + 1))
        boxes.append(InstanceBox(x, y, bw, bh, Category.SYNTHETIC))
    hue = rng.uniform(*palette.background_hue)
    sat = rng.uniform(0.6, 0.8)
    val = rng.uniform(0.5, 0.7)
    base = np.array(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float64)
    ramp = np.linspace(0.85, 1.15, s)[:, None] * np.ones((1, s))
    img = base[:, None, None] * ramp[None]
    # objects are achromatic: the palette fixes only their brightness
    for b in boxes:
        img[:, b.y : b.y + b.h, b.x : b.x + b.w] = rng.uniform(*palette.object_brightness)
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
    return img.astype(np.float32), tuple(boxes)


def generate_synthetic(spec: SyntheticSceneSpec) -> tuple[DatasetManifest, DatasetManifest]:
    """Two in-memory single-domain corpora with shared geometry statistics."""
    seeds = np.random.SeedSequence(spec.seed).spawn(2)
    names = tuple(p.name for p in spec.palettes)
    out = []
    for d, (palette, ss) in enumerate(zip(spec.palettes, seeds)):
        rng = np.random.default_rng(ss)
        records, pixels = [], {}
        for i in range(spec.n_images):
            img, boxes = _scene(spec, palette, rng)
            image_id = f"{palette.name}_{i:05d}"
            records.append(ImageRecord(image_id, None, spec.image_size, spec.image_size, palette.name, boxes))
            pixels[image_id] = img
        out.append(DatasetManifest(None, names, tuple(records), seed=spec.seed, pixels=pixels))
    return out[0], out[1]


def mean_background_hue(pixels, boxes=()) -> float:
    """Hue in [0, 1) of the mean RGB colour outside ``boxes``."""
    px = np.asarray(pixels, dtype=np.float64)
    mask = np.ones(px.shape[1:], dtype=bool)
    for b in boxes:
        mask[b.y : b.y + b.h, b.x : b.x + b.w] = False
    if not mask.any():
        mask[:] = True
    rgb = (px[:, mask].mean(axis=1) + 1.0) / 2.0
    return colorsys.rgb_to_hsv(*np.clip(rgb, 0.0, 1.0))[0]


def hue_offset(h: float, reference: float) -> float:
    """Signed circular difference ``h - reference`` in [-0.5, 0.5)."""
    return (h - reference + 0.5) % 1.0 - 0.5
