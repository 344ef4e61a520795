import numpy as np
import pytest

from removal_eval import (
    BinaryMask,
    FormatError,
    ManifestRow,
    ParseError,
    ValidationError,
    build_class_mask,
    decode_rle,
    dilate,
    encode_rle,
    parse_annotations,
    rasterize_polygon,
    read_manifest,
    select_sets,
    write_manifest,
)
from removal_eval.dataset import load_mask_png, save_mask_png


def brute_force_dilate(bits: np.ndarray, k: int) -> np.ndarray:
    """Per-pixel max-in-window oracle for the dilation contract."""
    if k <= 1:
        return bits.copy()
    a = k // 2
    h, w = bits.shape
    out = np.zeros_like(bits)
    for r in range(h):
        for c in range(w):
            r0, r1 = max(0, r - a), min(h, r + k - a)
            c0, c1 = max(0, c - a), min(w, c + k - a)
            out[r, c] = bits[r0:r1, c0:c1].any()
    return out


def point_in_ring(px: float, py: float, ring) -> bool:
    """Crossing-count oracle; counts edge crossings at x <= px."""
    xs = ring[0::2]
    ys = ring[1::2]
    n = len(xs)
    inside = False
    for i in range(n):
        x1, y1 = xs[i], ys[i]
        x2, y2 = xs[(i + 1) % n], ys[(i + 1) % n]
        if (y1 <= py < y2) or (y2 <= py < y1):
            xc = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if xc <= px:
                inside = not inside
    return inside


def brute_force_rasterize(rings, height, width) -> np.ndarray:
    out = np.zeros((height, width), dtype=bool)
    for r in range(height):
        for c in range(width):
            out[r, c] = any(point_in_ring(c + 0.5, r + 0.5, ring) for ring in rings)
    return out


def coco_doc():
    return {
        "images": [
            {"id": 1, "width": 10, "height": 10, "file_name": "one.png"},
            {"id": 2, "width": 10, "height": 10, "file_name": "two.png"},
        ],
        "annotations": [
            {
                "id": 100,
                "image_id": 2,
                "category_id": 1,
                "segmentation": {"counts": [0, 100], "size": [10, 10]},
                "iscrowd": 0,
            }
        ],
        "categories": [{"id": 1, "name": "person"}],
    }


class TestParseAnnotations:
    def test_two_images_one_annotation(self):
        index = parse_annotations(coco_doc())
        assert set(index.images) == {1, 2}
        assert len(index.instances[1]) == 0
        assert len(index.instances[2]) == 1
        assert index.instances[2][0].category_id == 1
        assert index.categories == {1: "person"}

    def test_empty_annotations(self):
        doc = coco_doc()
        doc["annotations"] = []
        index = parse_annotations(doc)
        assert all(len(v) == 0 for v in index.instances.values())

    def test_unknown_image_id(self):
        doc = coco_doc()
        doc["annotations"][0]["image_id"] = 999
        with pytest.raises(ValidationError, match="999"):
            parse_annotations(doc)

    def test_missing_field_reports_json_path(self):
        doc = coco_doc()
        del doc["images"][1]["width"]
        with pytest.raises(ParseError, match=r"\$\.images\[1\]\.width"):
            parse_annotations(doc)

    def test_missing_top_level_array(self):
        doc = coco_doc()
        del doc["categories"]
        with pytest.raises(ParseError, match=r"\$\.categories"):
            parse_annotations(doc)

    def test_polygon_segmentation_kept(self):
        doc = coco_doc()
        doc["annotations"][0]["segmentation"] = [[1.0, 1.0, 4.0, 1.0, 4.0, 4.0]]
        index = parse_annotations(doc)
        seg = index.instances[2][0].segmentation
        assert seg.rings == ((1.0, 1.0, 4.0, 1.0, 4.0, 4.0),)


class TestDecodeRle:
    def test_all_zero(self):
        mask = decode_rle([9], 3, 3)
        assert not mask.bits.any()

    def test_all_one(self):
        mask = decode_rle([0, 9], 3, 3)
        assert mask.bits.all()

    def test_column_major_runs(self):
        # Flat column-major positions 4, 5, 6 -> (r, c) = (1,1), (2,1), (0,2).
        mask = decode_rle([4, 3, 2], 3, 3)
        expected = np.zeros((3, 3), dtype=bool)
        expected[1, 1] = expected[2, 1] = expected[0, 2] = True
        assert np.array_equal(mask.bits, expected)

    def test_sum_mismatch(self):
        with pytest.raises(FormatError, match="sum"):
            decode_rle([4, 3], 3, 3)

    def test_negative_count(self):
        with pytest.raises(FormatError):
            decode_rle([-1, 10], 3, 3)

    def test_encode_decode_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            bits = rng.random((6, 5)) < rng.uniform(0.1, 0.9)
            mask = BinaryMask(bits)
            counts = encode_rle(mask)
            assert np.array_equal(decode_rle(counts, 6, 5).bits, bits)
            assert counts[0] == 0 or not bits.reshape(-1, order="F")[0]


class TestRasterizePolygon:
    def test_axis_aligned_square(self):
        ring = [0.6, 0.6, 3.6, 0.6, 3.6, 3.6, 0.6, 3.6]
        mask = rasterize_polygon([ring], 5, 5)
        assert np.array_equal(mask.bits, brute_force_rasterize([ring], 5, 5))
        assert mask.bits.sum() == 9
        assert mask.bits[1:4, 1:4].all()

    def test_degenerate_ring_empty(self):
        ring = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0]  # collinear, zero area
        assert not rasterize_polygon([ring], 5, 5).bits.any()

    def test_two_disjoint_squares_union(self):
        rings = [
            [0.2, 0.2, 2.2, 0.2, 2.2, 2.2, 0.2, 2.2],
            [4.2, 4.2, 6.2, 4.2, 6.2, 6.2, 4.2, 6.2],
        ]
        mask = rasterize_polygon(rings, 8, 8)
        assert np.array_equal(mask.bits, brute_force_rasterize(rings, 8, 8))
        assert mask.bits.sum() == 8  # 2x2 each

    def test_matches_oracle_on_random_polygons(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            n_pts = int(rng.integers(3, 8))
            ring = []
            for _ in range(n_pts):
                ring.extend([float(rng.uniform(0, 12)), float(rng.uniform(0, 12))])
            mask = rasterize_polygon([ring], 12, 12)
            assert np.array_equal(mask.bits, brute_force_rasterize([ring], 12, 12))

    def test_odd_coordinate_count(self):
        with pytest.raises(FormatError, match="odd"):
            rasterize_polygon([[1.0, 1.0, 2.0, 2.0, 3.0]], 5, 5)

    def test_too_few_points(self):
        with pytest.raises(FormatError):
            rasterize_polygon([[1.0, 1.0, 2.0, 2.0]], 5, 5)


class TestBuildClassMask:
    def test_no_instances_empty(self):
        index = parse_annotations(coco_doc())
        assert not build_class_mask(index, 1, 1).bits.any()

    def test_unknown_image(self):
        index = parse_annotations(coco_doc())
        with pytest.raises(ValidationError, match="77"):
            build_class_mask(index, 77, 1)

    def test_union_of_rle_and_polygon(self):
        doc = coco_doc()
        doc["annotations"] = [
            {
                "id": 1,
                "image_id": 1,
                "category_id": 1,
                "segmentation": {"counts": [0, 20, 80], "size": [10, 10]},
                "iscrowd": 0,
            },
            {
                "id": 2,
                "image_id": 1,
                "category_id": 1,
                "segmentation": [[4.4, 4.4, 8.4, 4.4, 8.4, 8.4, 4.4, 8.4]],
                "iscrowd": 0,
            },
        ]
        index = parse_annotations(doc)
        union = build_class_mask(index, 1, 1)
        rle_part = decode_rle([0, 20, 80], 10, 10).bits
        poly_part = brute_force_rasterize([doc["annotations"][1]["segmentation"][0]], 10, 10)
        assert np.array_equal(union.bits, rle_part | poly_part)

    def test_overlapping_instances_union_bound(self):
        doc = coco_doc()
        doc["annotations"] = [
            {"id": 1, "image_id": 1, "category_id": 1,
             "segmentation": {"counts": [0, 50, 50], "size": [10, 10]}, "iscrowd": 0},
            {"id": 2, "image_id": 1, "category_id": 1,
             "segmentation": {"counts": [30, 50, 20], "size": [10, 10]}, "iscrowd": 0},
        ]
        index = parse_annotations(doc)
        union = build_class_mask(index, 1, 1)
        assert union.bits.sum() <= 100
        assert union.bits.sum() == 80  # overlap of 20 pixels counted once

    def test_crowd_filter(self):
        doc = coco_doc()
        doc["annotations"][0]["iscrowd"] = 1
        index = parse_annotations(doc)
        assert build_class_mask(index, 2, 1, include_crowd=True).bits.all()
        assert not build_class_mask(index, 2, 1, include_crowd=False).bits.any()


class TestDilate:
    def test_kernel_zero_identity(self):
        rng = np.random.default_rng(1)
        bits = rng.random((9, 9)) < 0.3
        out = dilate(BinaryMask(bits), 0)
        assert np.array_equal(out.bits, bits)
        assert out.kernel_size == 0

    def test_kernel_one_identity(self):
        bits = np.eye(5, dtype=bool)
        out = dilate(BinaryMask(bits), 1)
        assert np.array_equal(out.bits, bits)
        assert out.kernel_size == 1

    def test_single_pixel_k3(self):
        bits = np.zeros((11, 11), dtype=bool)
        bits[5, 5] = True
        out = dilate(BinaryMask(bits), 3)
        expected = np.zeros((11, 11), dtype=bool)
        expected[4:7, 4:7] = True
        assert np.array_equal(out.bits, expected)

    def test_saturated_mask(self):
        bits = np.ones((7, 7), dtype=bool)
        for k in (2, 3, 10):
            assert dilate(BinaryMask(bits), k).bits.all()

    def test_negative_kernel(self):
        with pytest.raises(ValidationError):
            dilate(BinaryMask(np.zeros((3, 3), dtype=bool)), -1)

    def test_records_kernel_size(self):
        bits = np.zeros((5, 5), dtype=bool)
        bits[2, 2] = True
        assert dilate(BinaryMask(bits), 4).kernel_size == 4

    def test_oracle_monotonicity_extensivity(self):
        # Short sweep; the acceptance suite runs the full 100-mask version.
        rng = np.random.default_rng(7)
        kernels = (0, 1, 2, 3, 5, 10)
        for _ in range(10):
            bits = rng.random((32, 32)) < rng.uniform(0.02, 0.3)
            mask = BinaryMask(bits)
            results = {}
            for k in kernels:
                out = dilate(mask, k)
                assert np.array_equal(out.bits, brute_force_dilate(bits, k))
                assert (bits <= out.bits).all()  # extensivity
                results[k] = out.bits
            for k1, k2 in zip(kernels, kernels[1:]):
                assert (results[k1] <= results[k2]).all()  # monotonicity

    def test_even_kernel_anchor(self):
        # k=2, anchor (1, 1): window rows [r-1, r] x cols [c-1, c].
        bits = np.zeros((4, 4), dtype=bool)
        bits[1, 1] = True
        out = dilate(BinaryMask(bits), 2)
        expected = np.zeros((4, 4), dtype=bool)
        expected[1:3, 1:3] = True
        assert np.array_equal(out.bits, expected)


class TestSelectSets:
    def _index(self):
        # Image 1: coverage 0.50; image 2: no targets; image 3: coverage 0.10.
        doc = {
            "images": [
                {"id": 1, "width": 10, "height": 10, "file_name": "a.png"},
                {"id": 2, "width": 10, "height": 10, "file_name": "b.png"},
                {"id": 3, "width": 10, "height": 10, "file_name": "c.png"},
            ],
            "annotations": [
                {"id": 1, "image_id": 1, "category_id": 1,
                 "segmentation": {"counts": [0, 50, 50], "size": [10, 10]}, "iscrowd": 0},
                {"id": 2, "image_id": 3, "category_id": 1,
                 "segmentation": {"counts": [0, 10, 90], "size": [10, 10]}, "iscrowd": 0},
            ],
            "categories": [{"id": 1, "name": "person"}],
        }
        return parse_annotations(doc)

    def test_partition(self):
        selection = select_sets(self._index(), 1, 0.05, 0.40)
        assert [i for i, _ in selection.query] == [3]
        assert selection.query[0][1] == pytest.approx(0.10)
        assert selection.comparison == (2,)
        # image 1 at 50% coverage lands in neither set

    def test_coverage_band_is_inclusive(self):
        selection = select_sets(self._index(), 1, 0.10, 0.50)
        assert {i for i, _ in selection.query} == {1, 3}

    def test_small_coverage_excluded(self):
        # 0.5% coverage stays out of a [1%, 100%] band.
        doc = {
            "images": [{"id": 1, "width": 100, "height": 100, "file_name": "a.png"}],
            "annotations": [
                {"id": 1, "image_id": 1, "category_id": 1,
                 "segmentation": {"counts": [0, 50, 9950], "size": [100, 100]}, "iscrowd": 0}
            ],
            "categories": [{"id": 1, "name": "person"}],
        }
        selection = select_sets(parse_annotations(doc), 1, 0.01, 1.0)
        assert selection.query == ()
        assert selection.comparison == ()

    def test_bad_thresholds(self):
        with pytest.raises(ValidationError):
            select_sets(self._index(), 1, 0.4, 0.4)

    def test_disjointness_guard(self):
        with pytest.raises(ValidationError):
            from removal_eval import SetSelection

            SetSelection(query=((1, 0.2),), comparison=(1,), category_id=1, min_cov=0.0, max_cov=1.0)


class TestManifest:
    def test_round_trip(self, tmp_path):
        rows = [
            ManifestRow(id="q1", image_path="img/q1.png", mask_path="m/q1.png",
                        role="query", coverage=0.25, kernel_size=10),
            ManifestRow(id="c1", image_path="img/c1.png", mask_path=None,
                        role="comparison", coverage=0.0, kernel_size=0),
        ]
        write_manifest(rows, tmp_path / "m.json")
        assert read_manifest(tmp_path / "m.json") == rows

    def test_bad_role(self):
        with pytest.raises(ValidationError):
            ManifestRow(id="x", image_path="x.png", mask_path=None, role="other",
                        coverage=0.0, kernel_size=0)

    def test_missing_field(self, tmp_path):
        (tmp_path / "bad.json").write_text('[{"id": "x"}]')
        with pytest.raises(ParseError):
            read_manifest(tmp_path / "bad.json")


class TestMaskPng:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        bits = rng.random((14, 9)) < 0.4
        save_mask_png(BinaryMask(bits), tmp_path / "m.png")
        back = load_mask_png(tmp_path / "m.png", kernel_size=3)
        assert np.array_equal(back.bits, bits)
        assert back.kernel_size == 3

    def test_rejects_gray_values(self, tmp_path):
        from removal_eval import ImageBuffer, save_image_png

        save_image_png(ImageBuffer(np.full((4, 4), 128, dtype=np.uint8)), tmp_path / "g.png")
        with pytest.raises(FormatError, match="0 and 255"):
            load_mask_png(tmp_path / "g.png")
