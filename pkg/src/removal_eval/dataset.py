"""Segmentation-annotated dataset handling: COCO-format parsing, mask
decoding (integer-counts RLE and polygons), class masks, morphological
dilation for remover variants, and query/comparison set selection.

Selection semantics: an image whose target-class mask coverage falls inside
[min_cov, max_cov] is a query image; an image with zero target-class
instances is a comparison image; everything else belongs to neither set.
Coverage is always computed on the undilated mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import FormatError, ParseError, ValidationError
from .features import ImageBuffer, load_image_png, save_image_png


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Per-pixel removal-target indicator with dilation provenance.

    ``kernel_size`` records the dilation applied (0 = undilated).
    """

    bits: np.ndarray  # (height, width) bool, read-only
    kernel_size: int = 0

    def __post_init__(self):
        arr = np.array(self.bits, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)
        if self.kernel_size < 0:
            raise ValidationError(f"kernel_size must be >= 0, got {self.kernel_size}")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def coverage(self) -> float:
        return float(self.bits.mean())


# Segmentation encodings kept verbatim from the annotation document.

@dataclass(frozen=True)
class RleSegmentation:
    counts: tuple[int, ...]
    height: int
    width: int


@dataclass(frozen=True)
class PolygonSegmentation:
    rings: tuple[tuple[float, ...], ...]


Segmentation = Union[RleSegmentation, PolygonSegmentation]


@dataclass(frozen=True)
class ImageInfo:
    image_id: int
    width: int
    height: int
    file_name: str


@dataclass(frozen=True)
class Instance:
    category_id: int
    segmentation: Segmentation
    iscrowd: bool


@dataclass(frozen=True)
class AnnotationIndex:
    images: Mapping[int, ImageInfo]
    instances: Mapping[int, tuple[Instance, ...]]  # image id -> instances
    categories: Mapping[int, str]

    def instances_of(self, image_id: int, category_id: int, include_crowd: bool = True):
        out = []
        for inst in self.instances.get(image_id, ()):
            if inst.category_id != category_id:
                continue
            if inst.iscrowd and not include_crowd:
                continue
            out.append(inst)
        return out


@dataclass(frozen=True)
class SetSelection:
    """Query ids with base coverage, comparison ids, and the thresholds used."""

    query: tuple[tuple[int, float], ...]  # (image id, undilated coverage)
    comparison: tuple[int, ...]
    category_id: int
    min_cov: float
    max_cov: float

    def __post_init__(self):
        overlap = {i for i, _ in self.query} & set(self.comparison)
        if overlap:
            raise ValidationError(f"query and comparison overlap on image {overlap.pop()}")


def _require(obj: Mapping, key: str, json_path: str):
    if key not in obj:
        raise ParseError(f"missing field {key!r}", json_path=f"{json_path}.{key}")
    return obj[key]


def _parse_segmentation(seg, height: int, width: int, json_path: str) -> Segmentation:
    if isinstance(seg, Mapping):
        counts = _require(seg, "counts", json_path)
        if not isinstance(counts, list) or not all(isinstance(c, int) for c in counts):
            raise ParseError("RLE counts must be an integer list", json_path=f"{json_path}.counts")
        size = _require(seg, "size", json_path)
        if not (isinstance(size, list) and len(size) == 2):
            raise ParseError("RLE size must be [height, width]", json_path=f"{json_path}.size")
        return RleSegmentation(tuple(counts), int(size[0]), int(size[1]))
    if isinstance(seg, list):
        rings = []
        for k, ring in enumerate(seg):
            if not isinstance(ring, list):
                raise ParseError("polygon ring must be a list", json_path=f"{json_path}[{k}]")
            rings.append(tuple(float(v) for v in ring))
        return PolygonSegmentation(tuple(rings))
    raise ParseError(f"unsupported segmentation type {type(seg).__name__}", json_path=json_path)


def parse_annotations(doc: Mapping) -> AnnotationIndex:
    """Index a parsed COCO-layout document (images/annotations/categories)."""
    images: dict[int, ImageInfo] = {}
    for i, entry in enumerate(_require(doc, "images", "$")):
        path = f"$.images[{i}]"
        images[int(_require(entry, "id", path))] = ImageInfo(
            image_id=int(_require(entry, "id", path)),
            width=int(_require(entry, "width", path)),
            height=int(_require(entry, "height", path)),
            file_name=str(_require(entry, "file_name", path)),
        )

    categories: dict[int, str] = {}
    for i, entry in enumerate(_require(doc, "categories", "$")):
        path = f"$.categories[{i}]"
        cat_id = int(_require(entry, "id", path))
        if cat_id <= 0:
            raise ValidationError(f"category ids must be positive, got {cat_id}")
        categories[cat_id] = str(_require(entry, "name", path))

    instances: dict[int, list[Instance]] = {image_id: [] for image_id in images}
    for i, entry in enumerate(_require(doc, "annotations", "$")):
        path = f"$.annotations[{i}]"
        image_id = int(_require(entry, "image_id", path))
        if image_id not in images:
            raise ValidationError(f"annotation references unknown image id {image_id}")
        category_id = int(_require(entry, "category_id", path))
        if category_id <= 0:
            raise ValidationError(f"category ids must be positive, got {category_id}")
        info = images[image_id]
        seg = _parse_segmentation(
            _require(entry, "segmentation", path), info.height, info.width, f"{path}.segmentation"
        )
        instances[image_id].append(
            Instance(category_id=category_id, segmentation=seg, iscrowd=bool(entry.get("iscrowd", 0)))
        )

    return AnnotationIndex(
        images=images,
        instances={k: tuple(v) for k, v in instances.items()},
        categories=categories,
    )


def load_annotations(path: str | Path) -> AnnotationIndex:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc}", path=str(path)) from exc
    return parse_annotations(doc)


# ---------------------------------------------------------------------------
# Mask decoding
# ---------------------------------------------------------------------------

def decode_rle(counts: Sequence[int], height: int, width: int) -> BinaryMask:
    """Decode integer-counts RLE: column-major pixel order, runs alternate
    starting with zeros."""
    counts = list(counts)
    if any(c < 0 for c in counts):
        raise FormatError(f"negative run length in {counts}")
    total = sum(counts)
    if total != height * width:
        raise FormatError(
            f"run lengths sum to {total}, expected {height * width} for {height}x{width}"
        )
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return BinaryMask(flat.reshape((height, width), order="F"))


def encode_rle(mask: BinaryMask) -> list[int]:
    """Inverse of decode_rle (column-major runs starting with zeros)."""
    flat = mask.bits.reshape(-1, order="F").astype(np.int8)
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate([[0], boundaries, [flat.size]])
    runs = [int(r) for r in np.diff(edges)]
    if flat[0]:
        runs = [0] + runs
    return runs


def rasterize_polygon(
    rings: Sequence[Sequence[float]], height: int, width: int
) -> BinaryMask:
    """Scanline even-odd fill sampled at pixel centers (x+0.5, y+0.5); a
    pixel is on when its center is inside any ring."""
    bits = np.zeros((height, width), dtype=bool)
    centers_x = np.arange(width) + 0.5
    for ring in rings:
        if len(ring) % 2 != 0:
            raise FormatError(f"polygon ring has odd coordinate count {len(ring)}")
        if len(ring) < 6:
            raise FormatError(f"polygon ring needs >= 3 points, got {len(ring) // 2}")
        xs = np.asarray(ring[0::2], dtype=np.float64)
        ys = np.asarray(ring[1::2], dtype=np.float64)
        x2 = np.roll(xs, -1)
        y2 = np.roll(ys, -1)
        for r in range(height):
            yc = r + 0.5
            # Half-open span rule avoids double-counting shared vertices.
            hits = ((ys <= yc) & (yc < y2)) | ((y2 <= yc) & (yc < ys))
            if not hits.any():
                continue
            t = (yc - ys[hits]) / (y2[hits] - ys[hits])
            crossings = np.sort(xs[hits] + t * (x2[hits] - xs[hits]))
            inside = np.searchsorted(crossings, centers_x, side="right") % 2 == 1
            bits[r] |= inside
    return BinaryMask(bits)


def decode_segmentation(seg: Segmentation, height: int, width: int) -> BinaryMask:
    if isinstance(seg, RleSegmentation):
        if (seg.height, seg.width) != (height, width):
            raise ValidationError(
                f"RLE size {seg.height}x{seg.width} does not match image {height}x{width}"
            )
        return decode_rle(seg.counts, height, width)
    return rasterize_polygon(seg.rings, height, width)


def build_class_mask(
    index: AnnotationIndex,
    image_id: int,
    category_id: int,
    include_crowd: bool = True,
) -> BinaryMask:
    """Union of all decoded instance masks of one category on one image."""
    if image_id not in index.images:
        raise ValidationError(f"unknown image id {image_id}")
    info = index.images[image_id]
    bits = np.zeros((info.height, info.width), dtype=bool)
    for inst in index.instances_of(image_id, category_id, include_crowd):
        bits |= decode_segmentation(inst.segmentation, info.height, info.width).bits
    return BinaryMask(bits)


# ---------------------------------------------------------------------------
# Dilation
# ---------------------------------------------------------------------------

def dilate(mask: BinaryMask, kernel_size: int) -> BinaryMask:
    """Binary dilation with a kernel_size x kernel_size all-ones structuring
    element anchored at (floor(k/2), floor(k/2)); 0 and 1 are the identity.

    Output pixel (r, c) is on iff any input on-pixel lies in
    rows [r-a, r+k-1-a] x cols [c-a, c+k-1-a] clipped to the image,
    with a = floor(k/2).
    """
    if kernel_size < 0:
        raise ValidationError(f"kernel_size must be >= 0, got {kernel_size}")
    if kernel_size <= 1:
        return BinaryMask(mask.bits, kernel_size=kernel_size)
    k = kernel_size
    a = k // 2
    bits = mask.bits
    h, w = bits.shape
    # Separable: a k x k all-ones window is a 1 x k pass then a k x 1 pass.
    padded = np.zeros((h + k - 1, w), dtype=bool)
    padded[a : a + h] = bits
    rows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0).any(axis=-1)
    padded = np.zeros((h, w + k - 1), dtype=bool)
    padded[:, a : a + w] = rows
    out = np.lib.stride_tricks.sliding_window_view(padded, k, axis=1).any(axis=-1)
    return BinaryMask(out, kernel_size=k)


# ---------------------------------------------------------------------------
# Set selection
# ---------------------------------------------------------------------------

def select_sets(
    index: AnnotationIndex,
    category_id: int,
    min_cov: float,
    max_cov: float,
    include_crowd: bool = True,
) -> SetSelection:
    """Split images into query / comparison sets by target-class coverage.

    Comparison membership requires zero target-class instances of any kind;
    ``include_crowd`` only controls whether crowd regions count toward
    coverage.
    """
    if not (0.0 <= min_cov < max_cov <= 1.0):
        raise ValidationError(f"need 0 <= min_cov < max_cov <= 1, got [{min_cov}, {max_cov}]")
    query: list[tuple[int, float]] = []
    comparison: list[int] = []
    for image_id in sorted(index.images):
        all_instances = index.instances_of(image_id, category_id, include_crowd=True)
        if not all_instances:
            comparison.append(image_id)
            continue
        coverage = build_class_mask(index, image_id, category_id, include_crowd).coverage()
        if min_cov <= coverage <= max_cov:
            query.append((image_id, coverage))
    return SetSelection(
        query=tuple(query),
        comparison=tuple(comparison),
        category_id=category_id,
        min_cov=min_cov,
        max_cov=max_cov,
    )


# ---------------------------------------------------------------------------
# Manifests and mask PNGs
# ---------------------------------------------------------------------------

ROLE_QUERY = "query"
ROLE_COMPARISON = "comparison"


@dataclass(frozen=True)
class ManifestRow:
    id: str
    image_path: str
    mask_path: Optional[str]
    role: str
    coverage: float
    kernel_size: int

    def __post_init__(self):
        if self.role not in (ROLE_QUERY, ROLE_COMPARISON):
            raise ValidationError(f"role must be query or comparison, got {self.role!r}")
        if not (0.0 <= self.coverage <= 1.0):
            raise ValidationError(f"coverage must be in [0, 1], got {self.coverage}")
        if self.kernel_size < 0:
            raise ValidationError(f"kernel_size must be >= 0, got {self.kernel_size}")


def write_manifest(rows: Iterable[ManifestRow], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [
        {
            "id": row.id,
            "image_path": row.image_path,
            "mask_path": row.mask_path,
            "role": row.role,
            "coverage": row.coverage,
            "kernel_size": row.kernel_size,
        }
        for row in rows
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path: str | Path) -> list[ManifestRow]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc}", path=str(path)) from exc
    if not isinstance(payload, list):
        raise FormatError("manifest must be a JSON array", path=str(path))
    rows = []
    for i, entry in enumerate(payload):
        try:
            rows.append(
                ManifestRow(
                    id=str(entry["id"]),
                    image_path=str(entry["image_path"]),
                    mask_path=None if entry.get("mask_path") is None else str(entry["mask_path"]),
                    role=str(entry["role"]),
                    coverage=float(entry["coverage"]),
                    kernel_size=int(entry["kernel_size"]),
                )
            )
        except KeyError as exc:
            raise ParseError(f"missing field {exc.args[0]!r}", json_path=f"$[{i}]") from exc
    return rows


def save_mask_png(mask: BinaryMask, path: str | Path) -> None:
    """Masks serialize as 8-bit single-channel PNG, on = 255, off = 0."""
    save_image_png(ImageBuffer(mask.bits.astype(np.uint8) * 255), path)


def load_mask_png(path: str | Path, kernel_size: int = 0) -> BinaryMask:
    image = load_image_png(path)
    if image.channels != 1:
        raise FormatError(f"mask PNG must be single-channel, got {image.channels}", path=str(path))
    plane = image.data[:, :, 0]
    if not np.isin(plane, (0, 255)).all():
        raise FormatError("mask PNG must contain only 0 and 255", path=str(path))
    return BinaryMask(plane == 255, kernel_size=kernel_size)
