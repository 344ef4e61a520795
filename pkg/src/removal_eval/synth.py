"""Procedural paired-scene generator and naive built-in removers.

Each scene is rendered twice from the same seed: once with target-class
objects composited on top (``with``) and once without them; the mask marks
exactly the composited target footprint, so the two renders agree off-mask
pixel for pixel. Backgrounds and object fills are multi-octave value noise
rather than flat color, which keeps histogram-based features informative,
and target vs non-target objects draw from disjoint color palettes so
class presence is visible to the toy extractor.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import BinaryMask, ManifestRow, ROLE_COMPARISON, ROLE_QUERY, dilate, save_mask_png, write_manifest
from .errors import GenerationError, ValidationError
from .features import ImageBuffer, save_image_png

REMOVER_METHODS = ("gt_paste", "mean_fill", "noise_fill", "no_removal")

# Disjoint palettes: saturated warm target colors sit in histogram bins the
# backgrounds and cool non-target objects never populate, so class presence
# is visible to histogram features.
TARGET_PALETTE = ((240, 28, 28), (235, 150, 20), (225, 25, 120))
NONTARGET_PALETTE = ((42, 92, 198), (33, 158, 159), (58, 168, 64))

MAX_PLACEMENT_TRIES = 50


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for one benchmark's scenes."""

    width: int = 128
    height: int = 128
    background_octaves: int = 3
    background_cells: int = 4
    background_contrast: float = 0.25
    object_count_range: tuple[int, int] = (2, 4)
    object_size_range: tuple[float, float] = (0.12, 0.30)
    object_shapes: tuple[str, ...] = ("rectangle", "ellipse")
    object_texture_contrast: float = 0.25
    # Targets stay near their palette color; a strong texture would smear
    # their histogram signature across bins and dilute the class signal.
    target_texture_contrast: float = 0.06
    target_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValidationError("scenes must be at least 8x8")
        lo, hi = self.object_count_range
        if not (0 <= lo <= hi):
            raise ValidationError(f"bad object_count_range {self.object_count_range}")
        slo, shi = self.object_size_range
        if not (0.0 < slo <= shi <= 1.0):
            raise ValidationError(f"bad object_size_range {self.object_size_range}")
        if not (0.0 <= self.target_fraction <= 1.0):
            raise ValidationError(f"target_fraction must be in [0, 1], got {self.target_fraction}")
        for shape in self.object_shapes:
            if shape not in ("rectangle", "ellipse"):
                raise ValidationError(f"unknown object shape {shape!r}")
        if not self.object_shapes:
            raise ValidationError("object_shapes must not be empty")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


@dataclass(frozen=True, eq=False)
class ScenePair:
    with_image: ImageBuffer
    without_image: ImageBuffer
    mask: BinaryMask
    coverage: float


def _value_noise(rng: np.random.Generator, height: int, width: int,
                 octaves: int, base_cells: int) -> np.ndarray:
    """Multi-octave value noise in [0, 1]."""
    out = np.zeros((height, width), dtype=np.float64)
    amplitude = 1.0
    total = 0.0
    for octave in range(octaves):
        cells = base_cells * (2**octave)
        lattice = rng.random((cells + 1, cells + 1))
        u = (np.arange(height) + 0.5) / height * cells
        v = (np.arange(width) + 0.5) / width * cells
        iu = np.minimum(u.astype(np.int64), cells - 1)
        iv = np.minimum(v.astype(np.int64), cells - 1)
        fu = (u - iu)[:, None]
        fv = (v - iv)[None, :]
        top = lattice[iu][:, iv] * (1 - fv) + lattice[iu][:, iv + 1] * fv
        bottom = lattice[iu + 1][:, iv] * (1 - fv) + lattice[iu + 1][:, iv + 1] * fv
        out += amplitude * (top * (1 - fu) + bottom * fu)
        total += amplitude
        amplitude *= 0.5
    return out / total


def _render_background(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    planes = [
        _value_noise(rng, spec.height, spec.width, spec.background_octaves, spec.background_cells)
        for _ in range(3)
    ]
    noise = np.stack(planes, axis=2)
    centered = (noise - 0.5) * (255.0 * spec.background_contrast)
    return np.clip(128.0 + centered, 0, 255).astype(np.uint8)


def _object_footprint(rng: np.random.Generator, spec: SceneSpec, index: int) -> tuple[slice, slice, np.ndarray]:
    """Sample shape, size, and position; the footprint must fit the frame."""
    min_edge = min(spec.width, spec.height)
    for _ in range(MAX_PLACEMENT_TRIES):
        frac_w, frac_h = rng.uniform(*spec.object_size_range, size=2)
        obj_w = max(2, int(round(frac_w * min_edge)))
        obj_h = max(2, int(round(frac_h * min_edge)))
        if obj_w > spec.width or obj_h > spec.height:
            continue
        x0 = int(rng.integers(0, spec.width - obj_w + 1))
        y0 = int(rng.integers(0, spec.height - obj_h + 1))
        shape = spec.object_shapes[int(rng.integers(len(spec.object_shapes)))]
        if shape == "rectangle":
            footprint = np.ones((obj_h, obj_w), dtype=bool)
        else:
            ys = (np.arange(obj_h) + 0.5 - obj_h / 2.0) / (obj_h / 2.0)
            xs = (np.arange(obj_w) + 0.5 - obj_w / 2.0) / (obj_w / 2.0)
            footprint = ys[:, None] ** 2 + xs[None, :] ** 2 <= 1.0
        if footprint.any():
            return slice(y0, y0 + obj_h), slice(x0, x0 + obj_w), footprint
    raise GenerationError(f"could not place object in scene {index} after {MAX_PLACEMENT_TRIES} tries")


def _paint_object(
    rng: np.random.Generator,
    canvas: np.ndarray,
    rows: slice,
    cols: slice,
    footprint: np.ndarray,
    palette: Sequence[tuple[int, int, int]],
    contrast: float,
) -> None:
    color = np.asarray(palette[int(rng.integers(len(palette)))], dtype=np.float64)
    texture = _value_noise(rng, footprint.shape[0], footprint.shape[1], 2, 2)
    fill = color[None, None, :] + (texture[:, :, None] - 0.5) * (255.0 * contrast)
    fill = np.clip(fill, 0, 255).astype(np.uint8)
    region = canvas[rows, cols]
    region[footprint] = fill[footprint]


def generate_scene_pair(spec: SceneSpec, scene_index: int) -> ScenePair:
    """Render the paired capture for one scene index.

    ``without_image`` holds background plus non-target objects;
    ``with_image`` additionally composites target-class objects on top.
    Deterministic in (spec.seed, scene_index).
    """
    rng = np.random.default_rng([spec.seed, scene_index])
    lo, hi = spec.object_count_range
    n_objects = int(rng.integers(lo, hi + 1))
    n_target = int(np.ceil(spec.target_fraction * n_objects)) if spec.target_fraction > 0 else 0

    without = _render_background(rng, spec).copy()
    for _ in range(n_objects - n_target):
        rows, cols, footprint = _object_footprint(rng, spec, scene_index)
        _paint_object(rng, without, rows, cols, footprint, NONTARGET_PALETTE,
                      spec.object_texture_contrast)

    with_img = without.copy()
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    for _ in range(n_target):
        rows, cols, footprint = _object_footprint(rng, spec, scene_index)
        _paint_object(rng, with_img, rows, cols, footprint, TARGET_PALETTE,
                      spec.target_texture_contrast)
        mask[rows, cols] |= footprint

    binary = BinaryMask(mask)
    return ScenePair(
        with_image=ImageBuffer(with_img),
        without_image=ImageBuffer(without),
        mask=binary,
        coverage=binary.coverage(),
    )


def apply_remover(
    with_image: ImageBuffer,
    without_image: ImageBuffer,
    mask: BinaryMask,
    method: str,
    noise_seed: int = 0,
) -> ImageBuffer:
    """Naive removers; every method leaves off-mask pixels untouched.

    gt_paste copies the paired capture inside the mask (a perfect remover),
    mean_fill writes the mean off-mask color, noise_fill writes seeded
    uniform noise, no_removal returns the input unchanged.
    """
    if method not in REMOVER_METHODS:
        raise ValidationError(f"unknown remover method {method!r}")
    shape_w = (with_image.height, with_image.width, with_image.channels)
    shape_wo = (without_image.height, without_image.width, without_image.channels)
    if shape_w != shape_wo:
        raise ValidationError(f"image dimensions differ: {shape_w} vs {shape_wo}")
    if (mask.height, mask.width) != (with_image.height, with_image.width):
        raise ValidationError(
            f"mask {mask.height}x{mask.width} does not match image "
            f"{with_image.height}x{with_image.width}"
        )
    out = with_image.data.copy()
    bits = mask.bits
    if method == "no_removal" or not bits.any():
        return ImageBuffer(out)
    if method == "gt_paste":
        out[bits] = without_image.data[bits]
    elif method == "mean_fill":
        off = ~bits
        if off.any():
            mean_color = with_image.data[off].mean(axis=0)
        else:
            mean_color = np.full(with_image.channels, 128.0)
        out[bits] = np.clip(np.rint(mean_color), 0, 255).astype(np.uint8)
    else:  # noise_fill
        rng = np.random.default_rng(noise_seed)
        out[bits] = rng.integers(0, 256, size=(int(bits.sum()), with_image.channels), dtype=np.uint8)
    return ImageBuffer(out)


def _noise_seed(spec_seed: int, scene_index: int, kernel: int, method_index: int) -> int:
    seq = np.random.SeedSequence([spec_seed, scene_index, kernel, method_index])
    return int(seq.generate_state(1)[0])


def emit_benchmark(
    spec: SceneSpec,
    n_scenes: int,
    out_dir: str | Path,
    methods: Sequence[str] = REMOVER_METHODS,
    kernels: Sequence[int] = (0,),
) -> Path:
    """Write paired captures, masks, remover outputs, and a manifest.

    Layout under out_dir: with/, without/, masks/k{K}/, removed/{method}_k{K}/,
    manifest.json. Query rows point at remover outputs with their dilated
    masks; comparison rows point at the without captures. Re-running with an
    identical spec produces byte-identical files.
    """
    for method in methods:
        if method not in REMOVER_METHODS:
            raise ValidationError(f"unknown remover method {method!r}")
    for k in kernels:
        if k < 0:
            raise ValidationError(f"kernel sizes must be >= 0, got {k}")
    if n_scenes < 0:
        raise ValidationError(f"n_scenes must be >= 0, got {n_scenes}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows: list[ManifestRow] = []
    for i in range(n_scenes):
        pair = generate_scene_pair(spec, i)
        stem = f"{i:05d}.png"
        save_image_png(pair.with_image, out_dir / "with" / stem)
        save_image_png(pair.without_image, out_dir / "without" / stem)
        rows.append(
            ManifestRow(
                id=f"without_{i:05d}",
                image_path=str(Path("without") / stem),
                mask_path=None,
                role=ROLE_COMPARISON,
                coverage=0.0,
                kernel_size=0,
            )
        )
        for k in kernels:
            mask_k = dilate(pair.mask, k)
            save_mask_png(mask_k, out_dir / "masks" / f"k{k}" / stem)
            for mi, method in enumerate(methods):
                removed = apply_remover(
                    pair.with_image,
                    pair.without_image,
                    mask_k,
                    method,
                    noise_seed=_noise_seed(spec.seed, i, k, mi),
                )
                save_image_png(removed, out_dir / "removed" / f"{method}_k{k}" / stem)
                rows.append(
                    ManifestRow(
                        id=f"{method}_k{k}_{i:05d}",
                        image_path=str(Path("removed") / f"{method}_k{k}" / stem),
                        mask_path=str(Path("masks") / f"k{k}" / stem),
                        role=ROLE_QUERY,
                        coverage=pair.coverage,
                        kernel_size=k,
                    )
                )

    manifest_path = out_dir / "manifest.json"
    write_manifest(rows, manifest_path)
    return manifest_path
