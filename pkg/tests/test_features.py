import importlib.util
import math
import struct

import numpy as np
import pytest

from removal_eval import (
    BackendError,
    ExtractorSpec,
    FeatureMatrix,
    FormatError,
    ImageBuffer,
    ValidationError,
    extract_features,
    load_image_png,
    read_features,
    save_image_png,
    toy_descriptor,
    write_features,
)
from removal_eval.features import HIST_BINS, LUMA_WEIGHTS

HAVE_ONNXRUNTIME = importlib.util.find_spec("onnxruntime") is not None


def brute_force_descriptor(pixels: np.ndarray) -> np.ndarray:
    """Naive per-pixel reimplementation of the toy descriptor (test oracle)."""
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    h, w, _ = pixels.shape
    out = []
    for ch in range(3):
        hist = [0.0] * HIST_BINS
        for r in range(h):
            for c in range(w):
                hist[pixels[r, c, ch] // 16] += 1.0
        out.extend(v / (h * w) for v in hist)
    luma = [[sum(LUMA_WEIGHTS[k] * float(pixels[r, c, k]) for k in range(3)) for c in range(w)] for r in range(h)]
    ghist = [0.0] * HIST_BINS
    interior = 0
    for r in range(1, h - 1):
        for c in range(1, w - 1):
            gx = (luma[r][c + 1] - luma[r][c - 1]) / 2.0
            gy = (luma[r + 1][c] - luma[r - 1][c]) / 2.0
            interior += 1
            if gx == 0.0 and gy == 0.0:
                ghist[0] += 1.0
                continue
            angle = math.atan2(gy, gx) % (2.0 * math.pi)
            ghist[min(int(angle / (2.0 * math.pi / HIST_BINS)), HIST_BINS - 1)] += 1.0
    if interior:
        ghist = [v / interior for v in ghist]
    else:
        ghist = [1.0] + [0.0] * (HIST_BINS - 1)
    return np.array(out + ghist)


class TestImageBuffer:
    def test_shapes(self):
        img = ImageBuffer(np.zeros((4, 5, 3), dtype=np.uint8))
        assert (img.height, img.width, img.channels) == (4, 5, 3)

    def test_gray_2d_promoted(self):
        img = ImageBuffer(np.zeros((4, 5), dtype=np.uint8))
        assert img.channels == 1

    def test_rejects_bad_channel_count(self):
        with pytest.raises(ValidationError):
            ImageBuffer(np.zeros((4, 5, 2), dtype=np.uint8))

    def test_rejects_non_uint8(self):
        with pytest.raises(ValidationError):
            ImageBuffer(np.zeros((4, 5, 3), dtype=np.float32))


class TestPngIo:
    def test_round_trip_rgb(self, tmp_path):
        rng = np.random.default_rng(3)
        img = ImageBuffer(rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8))
        save_image_png(img, tmp_path / "a.png")
        back = load_image_png(tmp_path / "a.png")
        assert np.array_equal(back.data, img.data)

    def test_round_trip_gray(self, tmp_path):
        img = ImageBuffer(np.arange(64, dtype=np.uint8).reshape(8, 8))
        save_image_png(img, tmp_path / "g.png")
        back = load_image_png(tmp_path / "g.png")
        assert back.channels == 1
        assert np.array_equal(back.data, img.data)

    def test_rejects_non_png(self, tmp_path):
        from PIL import Image

        Image.new("RGB", (4, 4)).save(tmp_path / "x.jpg", format="JPEG")
        with pytest.raises(FormatError, match="PNG"):
            load_image_png(tmp_path / "x.jpg")

    def test_rejects_rgba(self, tmp_path):
        from PIL import Image

        Image.new("RGBA", (4, 4)).save(tmp_path / "x.png", format="PNG")
        with pytest.raises(FormatError, match="mode"):
            load_image_png(tmp_path / "x.png")

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "junk.png").write_bytes(b"not an image at all")
        with pytest.raises(FormatError):
            load_image_png(tmp_path / "junk.png")


class TestToyDescriptor:
    def test_black_image(self):
        d = toy_descriptor(ImageBuffer(np.zeros((8, 8, 3), dtype=np.uint8)))
        expected_block = np.zeros(16)
        expected_block[0] = 1.0
        for block in range(4):
            assert np.array_equal(d[block * 16 : (block + 1) * 16], expected_block)

    def test_constant_255(self):
        d = toy_descriptor(ImageBuffer(np.full((8, 8, 3), 255, dtype=np.uint8)))
        for ch in range(3):
            block = d[ch * 16 : (ch + 1) * 16]
            assert block[15] == 1.0 and block.sum() == 1.0
        assert d[48] == 1.0  # zero-gradient one-hot

    def test_blocks_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            img = ImageBuffer(rng.integers(0, 256, size=(13, 11, 3), dtype=np.uint8))
            d = toy_descriptor(img)
            assert d.shape == (64,)
            assert np.isfinite(d).all()
            for block in range(4):
                assert abs(d[block * 16 : (block + 1) * 16].sum() - 1.0) <= 1e-9

    def test_mirrored_image_same_color_histograms(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(12, 18, 3), dtype=np.uint8)
        d = toy_descriptor(ImageBuffer(img))
        d_mirror = toy_descriptor(ImageBuffer(img[:, ::-1]))
        assert np.array_equal(d[:48], d_mirror[:48])

    def test_vertical_step_edge_horizontal_bins(self):
        img = np.zeros((16, 16, 3), dtype=np.uint8)
        img[:, 8:] = 255
        d = toy_descriptor(ImageBuffer(img))
        grad = d[48:]
        # All mass in the two horizontal-orientation bins (0 and 8).
        assert grad[0] + grad[8] == 1.0
        assert np.array_equal(brute_force_descriptor(img), d)

    def test_matches_brute_force_on_random_images(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            img = rng.integers(0, 256, size=(9, 8, 3), dtype=np.uint8)
            assert np.allclose(brute_force_descriptor(img), toy_descriptor(ImageBuffer(img)), atol=1e-12)

    def test_single_channel_replication(self):
        gray = np.arange(64, dtype=np.uint8).reshape(8, 8)
        d1 = toy_descriptor(ImageBuffer(gray))
        d3 = toy_descriptor(ImageBuffer(np.repeat(gray[:, :, None], 3, axis=2)))
        assert np.array_equal(d1, d3)


class TestExtractorSpec:
    def test_toy_defaults(self):
        spec = ExtractorSpec(backend="toy")
        assert spec.output_dim == 64
        assert len(spec.fingerprint) == 64

    def test_unknown_backend(self):
        with pytest.raises(ValidationError):
            ExtractorSpec(backend="magic")

    def test_neural_requires_model(self):
        with pytest.raises(ValidationError):
            ExtractorSpec(backend="neural")

    def test_fingerprint_sensitive_to_fields(self, tmp_path):
        toy = ExtractorSpec(backend="toy")
        assert ExtractorSpec(backend="toy").fingerprint == toy.fingerprint
        assert ExtractorSpec(backend="toy", input_edge=128).fingerprint != toy.fingerprint
        assert ExtractorSpec(backend="toy", output_dim=64) == toy

    def test_fingerprint_sensitive_to_model_bytes(self, tmp_path):
        a = tmp_path / "a.onnx"
        b = tmp_path / "b.onnx"
        a.write_bytes(b"model-one")
        b.write_bytes(b"model-two")
        fa = ExtractorSpec(backend="neural", model_path=str(a)).fingerprint
        fb = ExtractorSpec(backend="neural", model_path=str(b)).fingerprint
        assert fa != fb


class TestExtractFeatures:
    def _items(self, n=4, seed=0):
        rng = np.random.default_rng(seed)
        return [
            (f"im{i}", ImageBuffer(rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)))
            for i in range(n)
        ]

    def test_toy_extraction(self):
        items = self._items()
        m = extract_features(items, ExtractorSpec(backend="toy"))
        assert m.ids == tuple(i for i, _ in items)
        assert m.dim == 64
        assert np.isfinite(m.data).all()
        # Block normalization survives float32 quantization to ~1e-6.
        for row in m.data:
            for block in range(4):
                assert abs(row[block * 16 : (block + 1) * 16].sum() - 1.0) <= 1e-6

    def test_deterministic_across_runs_and_threads(self):
        items = self._items(n=8)
        spec = ExtractorSpec(backend="toy")
        a = extract_features(items, spec)
        b = extract_features(items, spec)
        c = extract_features(items, spec, threads=4)
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(a.data, c.data)

    def test_values_are_float32_exact(self):
        m = extract_features(self._items(), ExtractorSpec(backend="toy"))
        assert np.array_equal(m.data, m.data.astype(np.float32).astype(np.float64))

    def test_precomputed_lookup(self, tmp_path):
        base = extract_features(self._items(n=5), ExtractorSpec(backend="toy"))
        path = tmp_path / "all.feat"
        write_features(base, path)
        spec = ExtractorSpec(backend="precomputed", model_path=str(path))
        subset = extract_features([("im3", None), ("im1", None)], spec)
        assert subset.ids == ("im3", "im1")
        assert np.array_equal(subset.data[0], base.data[3])
        assert np.array_equal(subset.data[1], base.data[1])

    def test_precomputed_missing_id(self, tmp_path):
        base = extract_features(self._items(n=2), ExtractorSpec(backend="toy"))
        path = tmp_path / "all.feat"
        write_features(base, path)
        spec = ExtractorSpec(backend="precomputed", model_path=str(path))
        with pytest.raises(ValidationError, match="ghost"):
            extract_features([("ghost", None)], spec)

    @pytest.mark.skipif(HAVE_ONNXRUNTIME, reason="onnxruntime installed")
    def test_neural_without_runtime_is_backend_error(self, tmp_path):
        model = tmp_path / "m.onnx"
        model.write_bytes(b"\x08\x01")
        spec = ExtractorSpec(backend="neural", model_path=str(model))
        with pytest.raises(BackendError, match="onnxruntime"):
            extract_features(self._items(n=1), spec)

    @pytest.mark.skipif(not HAVE_ONNXRUNTIME, reason="onnxruntime not installed")
    def test_neural_missing_model_file(self, tmp_path):
        model = tmp_path / "m.onnx"
        model.write_bytes(b"\x08\x01")
        spec = ExtractorSpec(backend="neural", model_path=str(model))
        (tmp_path / "m.onnx").unlink()
        with pytest.raises(BackendError):
            extract_features(self._items(n=1), spec)


class TestFeatureContainer:
    def _matrix(self, n=3, dim=5, seed=0):
        rng = np.random.default_rng(seed)
        data = rng.normal(size=(n, dim)).astype(np.float32).astype(np.float64)
        return FeatureMatrix([f"id-{i}" for i in range(n)], data)

    def test_round_trip_bit_exact(self, tmp_path):
        m = self._matrix(n=7, dim=11)
        write_features(m, tmp_path / "f.feat")
        back = read_features(tmp_path / "f.feat")
        assert back.ids == m.ids
        assert np.array_equal(back.data, m.data)

    def test_round_trip_unicode_ids(self, tmp_path):
        m = FeatureMatrix(["café", "ångström"], np.eye(2, dtype=np.float32))
        write_features(m, tmp_path / "u.feat")
        assert read_features(tmp_path / "u.feat").ids == m.ids

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.feat").write_bytes(b"")
        with pytest.raises(FormatError) as excinfo:
            read_features(tmp_path / "e.feat")
        assert excinfo.value.offset == 0

    def test_bad_magic(self, tmp_path):
        (tmp_path / "b.feat").write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError) as excinfo:
            read_features(tmp_path / "b.feat")
        assert excinfo.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        # N=2, D=3 container carrying only 5 of the 6 payload floats.
        blob = b"FEAT"
        blob += struct.pack("<I", 1)
        blob += struct.pack("<Q", 2)
        blob += struct.pack("<I", 3)
        for name in (b"a", b"b"):
            blob += struct.pack("<H", len(name)) + name
        blob += struct.pack("<5f", *range(5))
        path = tmp_path / "t.feat"
        path.write_bytes(blob)
        with pytest.raises(FormatError, match="truncated") as excinfo:
            read_features(path)
        assert excinfo.value.offset == 26  # header 20 + id table 6

    def test_trailing_bytes(self, tmp_path):
        m = self._matrix()
        path = tmp_path / "x.feat"
        write_features(m, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            read_features(path)

    def test_duplicate_ids_rejected(self, tmp_path):
        blob = b"FEAT" + struct.pack("<I", 1) + struct.pack("<Q", 2) + struct.pack("<I", 1)
        for name in (b"same", b"same"):
            blob += struct.pack("<H", len(name)) + name
        blob += struct.pack("<2f", 1.0, 2.0)
        path = tmp_path / "d.feat"
        path.write_bytes(blob)
        with pytest.raises(ValidationError, match="same"):
            read_features(path)

    def test_random_f32_grid_round_trips(self, tmp_path):
        rng = np.random.default_rng(9)
        for trial in range(5):
            n, dim = int(rng.integers(1, 30)), int(rng.integers(1, 40))
            data = rng.normal(scale=100, size=(n, dim)).astype(np.float32).astype(np.float64)
            m = FeatureMatrix([f"r{trial}-{i}" for i in range(n)], data)
            write_features(m, tmp_path / f"{trial}.feat")
            back = read_features(tmp_path / f"{trial}.feat")
            assert back.ids == m.ids and np.array_equal(back.data, m.data)
