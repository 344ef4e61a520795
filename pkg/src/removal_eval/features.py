"""Image buffers, feature extraction backends, and the feature container.

Three backends share one entry point: ``toy`` (a hermetic 64-d histogram
descriptor), ``neural`` (an ONNX model producing pooled activations), and
``precomputed`` (row lookup in an existing feature container). Extracted
rows are quantized to 32-bit float values so that the on-disk container
round-trips bit-exactly with what downstream modules consume.

Feature container layout (little-endian): magic "FEAT", u32 version = 1,
u64 N, u32 D, per row u16 id length + UTF-8 id bytes, then N*D float32
values in row-major order.
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import BackendError, FormatError, ValidationError
from .stats import FeatureMatrix

MAGIC = b"FEAT"
FORMAT_VERSION = 1

TOY_DIM = 64
NEURAL_DEFAULT_DIM = 2048
NEURAL_DEFAULT_EDGE = 299

# Rec.601 luma weights; part of the toy descriptor definition (fingerprinted).
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
HIST_BINS = 16


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """8-bit image, row-major, interleaved channels (1 = gray, 3 = RGB)."""

    data: np.ndarray  # (height, width, channels) uint8, read-only

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.dtype != np.uint8:
            raise ValidationError(f"image samples must be uint8, got {arr.dtype}")
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValidationError(f"image must be HxWx{{1,3}}, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"image must be at least 1x1, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def load_image_png(path: str | Path) -> ImageBuffer:
    """Read an 8-bit gray or RGB PNG. Other modes and formats are rejected."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise FormatError(f"expected PNG, got {img.format}", path=str(path))
            if img.mode not in ("L", "RGB"):
                raise FormatError(
                    f"unsupported PNG mode {img.mode!r} (need 8-bit L or RGB)",
                    path=str(path),
                )
            arr = np.asarray(img, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise FormatError(f"not a decodable image: {exc}", path=str(path)) from exc
    return ImageBuffer(arr)


def save_image_png(image: ImageBuffer, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = image.data[:, :, 0] if image.channels == 1 else image.data
    Image.fromarray(arr).save(path, format="PNG")


@dataclass(frozen=True)
class ExtractorSpec:
    """Identifies an extractor backend and everything that shapes its output.

    The fingerprint hashes the backend name, preprocessing constants, and
    (for file-backed backends) the model bytes, so any change that could
    alter features yields a different fingerprint.
    """

    backend: str
    model_path: Optional[str] = None
    input_edge: int = NEURAL_DEFAULT_EDGE
    output_dim: int = 0
    fingerprint: str = ""

    def __post_init__(self):
        if self.backend not in ("toy", "neural", "precomputed"):
            raise ValidationError(f"unknown backend {self.backend!r}")
        if self.backend in ("neural", "precomputed") and not self.model_path:
            raise ValidationError(f"{self.backend} backend requires model_path")
        if self.input_edge < 1:
            raise ValidationError(f"input_edge must be positive, got {self.input_edge}")
        if self.output_dim == 0:
            default = {"toy": TOY_DIM, "neural": NEURAL_DEFAULT_DIM}.get(self.backend)
            if default is None:
                default = _container_dim(self.model_path)
            object.__setattr__(self, "output_dim", default)
        if self.output_dim < 1:
            raise ValidationError(f"output_dim must be positive, got {self.output_dim}")
        if not self.fingerprint:
            object.__setattr__(self, "fingerprint", _compute_fingerprint(self))


def _hash_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as exc:
        raise BackendError(f"cannot read model file {path}: {exc}") from exc
    return digest.hexdigest()


def _compute_fingerprint(spec: ExtractorSpec) -> str:
    model_hash = _hash_file(spec.model_path) if spec.model_path else "none"
    payload = (
        f"{spec.backend}|v1|edge={spec.input_edge}|dim={spec.output_dim}|"
        f"bins={HIST_BINS}|luma={LUMA_WEIGHTS}|resize=bilinear-halfpixel|"
        f"scale=[-1,1]|model={model_hash}"
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _container_dim(path: str | Path) -> int:
    # Header-only read; byte 16..20 holds D (see module docstring).
    try:
        with open(path, "rb") as fh:
            header = fh.read(20)
    except OSError as exc:
        raise BackendError(f"cannot read feature container {path}: {exc}") from exc
    if len(header) < 20 or header[:4] != MAGIC:
        raise FormatError("bad magic (expected 'FEAT')", offset=0, path=str(path))
    (version,) = struct.unpack("<I", header[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4, path=str(path))
    return struct.unpack("<I", header[16:20])[0]


# ---------------------------------------------------------------------------
# Toy descriptor
# ---------------------------------------------------------------------------

def toy_descriptor(image: ImageBuffer) -> np.ndarray:
    """Hermetic 64-d descriptor: three 16-bin channel histograms plus a
    16-bin gradient-orientation histogram, each block L1-normalized.

    Single-channel images are replicated to three channels. Orientation
    uses central differences on the Rec.601 luma plane (interior pixels
    only); zero-magnitude pixels land in bin 0, so a flat image yields a
    one-hot gradient block.
    """
    pixels = image.data
    if image.channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    count = pixels.shape[0] * pixels.shape[1]
    blocks = []
    for ch in range(3):
        hist = np.bincount((pixels[:, :, ch] >> 4).ravel(), minlength=HIST_BINS)
        blocks.append(hist.astype(np.float64) / count)

    luma = (
        LUMA_WEIGHTS[0] * pixels[:, :, 0].astype(np.float64)
        + LUMA_WEIGHTS[1] * pixels[:, :, 1].astype(np.float64)
        + LUMA_WEIGHTS[2] * pixels[:, :, 2].astype(np.float64)
    )
    grad_hist = np.zeros(HIST_BINS, dtype=np.float64)
    if luma.shape[0] >= 3 and luma.shape[1] >= 3:
        gx = (luma[1:-1, 2:] - luma[1:-1, :-2]) / 2.0
        gy = (luma[2:, 1:-1] - luma[:-2, 1:-1]) / 2.0
        angle = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
        bins = np.minimum((angle / (2.0 * np.pi / HIST_BINS)).astype(np.int64), HIST_BINS - 1)
        bins[(gx == 0) & (gy == 0)] = 0
        grad_hist = np.bincount(bins.ravel(), minlength=HIST_BINS).astype(np.float64)
        grad_hist /= gx.size
    else:
        grad_hist[0] = 1.0  # no interior pixels: treat as an all-zero gradient field
    blocks.append(grad_hist)
    return np.concatenate(blocks)


# ---------------------------------------------------------------------------
# Neural (ONNX) backend
# ---------------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping (float64)."""
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[:2]
    rows = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    cols = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None, None]
    fc = (cols - c0)[None, :, None]
    top = arr[r0][:, c0] * (1 - fc) + arr[r0][:, c1] * fc
    bottom = arr[r1][:, c0] * (1 - fc) + arr[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


class _NeuralBackend:
    def __init__(self, spec: ExtractorSpec):
        try:
            import onnxruntime  # noqa: F401  (optional dependency)
        except ImportError as exc:
            raise BackendError(
                "neural backend requires the optional 'onnxruntime' package"
            ) from exc
        import onnxruntime as ort

        if not Path(spec.model_path).is_file():
            raise BackendError(f"model file not found: {spec.model_path}")
        try:
            self.session = ort.InferenceSession(
                str(spec.model_path), providers=["CPUExecutionProvider"]
            )
        except Exception as exc:  # onnxruntime raises its own hierarchy
            raise BackendError(f"failed to load model {spec.model_path}: {exc}") from exc
        self.input_name = self.session.get_inputs()[0].name
        self.spec = spec

    def __call__(self, image_id: str, image: ImageBuffer) -> np.ndarray:
        if image.channels != 3:
            raise ValidationError(f"neural backend requires 3 channels (id {image_id!r})")
        edge = self.spec.input_edge
        resized = resize_bilinear(image.data, edge, edge)
        scaled = resized / 127.5 - 1.0
        batch = scaled.transpose(2, 0, 1)[None].astype(np.float32)
        out = self.session.run(None, {self.input_name: batch})[0]
        row = np.asarray(out).reshape(-1)
        if row.size != self.spec.output_dim:
            raise BackendError(
                f"model produced {row.size} values, expected {self.spec.output_dim}"
            )
        return row.astype(np.float64)


# ---------------------------------------------------------------------------
# Extraction entry point
# ---------------------------------------------------------------------------

def extract_features(
    items: Sequence[tuple[str, Optional[ImageBuffer]]],
    spec: ExtractorSpec,
    threads: int = 1,
) -> FeatureMatrix:
    """Turn ordered (id, image) pairs into a FeatureMatrix.

    Row order follows input order regardless of worker scheduling, and
    values are quantized to float32 precision so the container round-trip
    is exact. The precomputed backend ignores image payloads and looks ids
    up in the container at ``spec.model_path``.
    """
    if not items:
        raise ValidationError("no images to extract")
    ids = [item[0] for item in items]

    if spec.backend == "precomputed":
        table = read_features(spec.model_path)
        index = table.row_index()
        rows = []
        for image_id in ids:
            if image_id not in index:
                raise ValidationError(
                    f"id {image_id!r} not present in precomputed features {spec.model_path}"
                )
            rows.append(table.data[index[image_id]])
        data = np.vstack(rows)
        if data.shape[1] != spec.output_dim:
            raise ValidationError(
                f"precomputed features have dim {data.shape[1]}, spec says {spec.output_dim}"
            )
        return FeatureMatrix(ids, data)

    if spec.backend == "toy":
        def run(item: tuple[str, Optional[ImageBuffer]]) -> np.ndarray:
            image_id, image = item
            if image is None:
                raise ValidationError(f"missing image payload for id {image_id!r}")
            return toy_descriptor(image)
    else:
        backend = _NeuralBackend(spec)

        def run(item: tuple[str, Optional[ImageBuffer]]) -> np.ndarray:
            image_id, image = item
            if image is None:
                raise ValidationError(f"missing image payload for id {image_id!r}")
            return backend(image_id, image)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, items))
    else:
        rows = [run(item) for item in items]
    data = np.vstack(rows).astype(np.float32).astype(np.float64)
    if data.shape[1] != spec.output_dim:
        raise ValidationError(
            f"backend produced dim {data.shape[1]}, spec says {spec.output_dim}"
        )
    return FeatureMatrix(ids, data)


# ---------------------------------------------------------------------------
# Feature container I/O
# ---------------------------------------------------------------------------

def write_features(matrix: FeatureMatrix, path: str | Path) -> None:
    """Write the container format documented in the module docstring.

    Values are stored as float32; matrices produced by extract_features are
    float32-exact, so write -> read reproduces them bit for bit.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    encoded_ids = []
    for image_id in matrix.ids:
        raw = image_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"id too long to serialize ({len(raw)} bytes)")
        encoded_ids.append(raw)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", matrix.n))
        fh.write(struct.pack("<I", matrix.dim))
        for raw in encoded_ids:
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(matrix.data.astype("<f4").tobytes(order="C"))


def read_features(path: str | Path) -> FeatureMatrix:
    """Read a feature container; format violations report the byte offset."""
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()

    offset = 0

    def need(nbytes: int, what: str) -> bytes:
        nonlocal offset
        if offset + nbytes > len(blob):
            raise FormatError(f"truncated while reading {what}", offset=offset, path=str(path))
        chunk = blob[offset : offset + nbytes]
        offset += nbytes
        return chunk

    if blob[:4] != MAGIC:
        raise FormatError("bad magic (expected 'FEAT')", offset=0, path=str(path))
    offset = 4
    (version,) = struct.unpack("<I", need(4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4, path=str(path))
    (n,) = struct.unpack("<Q", need(8, "row count"))
    (dim,) = struct.unpack("<I", need(4, "dimension"))
    ids = []
    for i in range(n):
        (id_len,) = struct.unpack("<H", need(2, f"id length of row {i}"))
        ids.append(need(id_len, f"id bytes of row {i}").decode("utf-8"))
    payload = need(n * dim * 4, "feature payload")
    if offset != len(blob):
        raise FormatError("trailing bytes after payload", offset=offset, path=str(path))
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, dim)
    if len(set(ids)) != len(ids):
        seen: set[str] = set()
        for image_id in ids:
            if image_id in seen:
                raise ValidationError(f"duplicate id {image_id!r} in {path}")
            seen.add(image_id)
    return FeatureMatrix(ids, data)
