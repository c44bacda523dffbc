import numpy as np
import pytest

from segdet.geometry import (
    BBox,
    BinaryMask,
    ProposalSet,
    box_iou,
    box_iou_many,
    connected_components,
    generate_proposals,
    mask_box_iou,
    nms,
    scale_box,
)


def rasterize(box: BBox, h: int, w: int) -> np.ndarray:
    grid = np.zeros((h, w), dtype=bool)
    grid[max(box.y0, 0) : box.y1, max(box.x0, 0) : box.x1] = True
    return grid


def pixel_iou_oracle(a: BBox, b: BBox) -> float:
    """Brute-force IoU: rasterize both boxes and count set bits."""
    h = max(a.y1, b.y1)
    w = max(a.x1, b.x1)
    ra, rb = rasterize(a, h, w), rasterize(b, h, w)
    inter = np.count_nonzero(ra & rb)
    union = np.count_nonzero(ra | rb)
    return inter / union


def flood_fill_oracle(bits: np.ndarray) -> list[np.ndarray]:
    """Independent 4-connected labeling by iterative set expansion."""
    h, w = bits.shape
    seen = np.zeros_like(bits, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if not bits[r, c] or seen[r, c]:
                continue
            frontier = {(r, c)}
            comp = np.zeros_like(bits, dtype=bool)
            while frontier:
                nxt = set()
                for y, x in frontier:
                    if seen[y, x]:
                        continue
                    seen[y, x] = True
                    comp[y, x] = True
                    for ny, nx in ((y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)):
                        if 0 <= ny < h and 0 <= nx < w and bits[ny, nx] and not seen[ny, nx]:
                            nxt.add((ny, nx))
                frontier = nxt
            comps.append(comp)
    return comps


def nms_reference(boxes: list[BBox], scores: np.ndarray, thresh: float) -> list[int]:
    """Quadratic reference: repeatedly take the best unsuppressed box."""
    alive = list(range(len(boxes)))
    kept = []
    while alive:
        best = min(alive, key=lambda i: (-scores[i], i))
        kept.append(best)
        alive = [i for i in alive if i != best and box_iou(boxes[best], boxes[i]) <= thresh]
    return kept


def random_box(rng, extent=30) -> BBox:
    x0 = int(rng.integers(0, extent - 1))
    y0 = int(rng.integers(0, extent - 1))
    x1 = int(rng.integers(x0 + 1, extent))
    y1 = int(rng.integers(y0 + 1, extent))
    return BBox(x0, y0, x1, y1)


class TestBoxIou:
    def test_identity(self):
        a = BBox(0, 0, 10, 10)
        assert box_iou(a, a) == 1.0

    def test_disjoint(self):
        assert box_iou(BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)) == 0.0

    def test_half_overlap_matches_pixel_oracle(self):
        a, b = BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)
        assert box_iou(a, b) == pytest.approx(pixel_iou_oracle(a, b), abs=1e-12)

    def test_matches_pixel_oracle_randomized(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            a, b = random_box(rng), random_box(rng)
            assert box_iou(a, b) == pytest.approx(pixel_iou_oracle(a, b), abs=1e-12)

    def test_symmetry_randomized(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            a, b = random_box(rng), random_box(rng)
            assert box_iou(a, b) == box_iou(b, a)

    def test_many_matches_scalar(self):
        rng = np.random.default_rng(13)
        a = random_box(rng)
        others = [random_box(rng) for _ in range(20)]
        got = box_iou_many(a, ProposalSet(others).coords())
        want = [box_iou(a, b) for b in others]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            BBox(5, 5, 5, 10)


class TestConnectedComponents:
    def test_empty_mask(self):
        assert connected_components(BinaryMask(np.zeros((6, 6), dtype=bool))) == []

    def test_solid_rectangle_is_one_component(self):
        bits = np.zeros((8, 8), dtype=bool)
        bits[2:5, 1:7] = True
        comps = connected_components(BinaryMask(bits))
        assert len(comps) == 1
        np.testing.assert_array_equal(comps[0].bits, bits)

    def test_diagonal_touch_splits_under_4_connectivity(self):
        bits = np.zeros((4, 4), dtype=bool)
        bits[0:2, 0:2] = True
        bits[2:4, 2:4] = True
        comps = connected_components(BinaryMask(bits))
        assert len(comps) == 2
        oracle = flood_fill_oracle(bits)
        assert len(oracle) == 2
        for got, want in zip(comps, oracle):
            np.testing.assert_array_equal(got.bits, want)

    def test_matches_flood_fill_oracle_randomized(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            bits = rng.random((10, 12)) < 0.45
            comps = connected_components(BinaryMask(bits))
            oracle = flood_fill_oracle(bits)
            assert len(comps) == len(oracle)
            for got, want in zip(comps, oracle):
                np.testing.assert_array_equal(got.bits, want)

    def test_components_partition_set_bits(self):
        rng = np.random.default_rng(5)
        for _ in range(40):
            bits = rng.random((9, 9)) < 0.5
            comps = connected_components(BinaryMask(bits))
            union = np.zeros_like(bits)
            total = 0
            for comp in comps:
                assert not (union & comp.bits).any(), "components overlap"
                union |= comp.bits
                total += comp.area
            np.testing.assert_array_equal(union, bits)
            assert total == int(bits.sum())


class TestMaskBoxIou:
    def test_component_filling_box(self):
        bits = np.zeros((10, 10), dtype=bool)
        bits[2:6, 3:8] = True
        assert mask_box_iou(BinaryMask(bits), BBox(3, 2, 8, 6)) == 1.0

    def test_disjoint(self):
        bits = np.zeros((10, 10), dtype=bool)
        bits[0:2, 0:2] = True
        assert mask_box_iou(BinaryMask(bits), BBox(5, 5, 9, 9)) == 0.0

    def test_left_half_of_box(self):
        bits = np.zeros((10, 10), dtype=bool)
        bits[0:4, 0:4] = True
        assert mask_box_iou(BinaryMask(bits), BBox(0, 0, 8, 4)) == 0.5

    def test_empty_component_rejected(self):
        with pytest.raises(ValueError):
            mask_box_iou(BinaryMask(np.zeros((4, 4), dtype=bool)), BBox(0, 0, 2, 2))

    def test_matches_rasterized_oracle_randomized(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            bits = rng.random((12, 12)) < 0.4
            if not bits.any():
                continue
            box = random_box(rng, extent=12)
            comp = BinaryMask(bits)
            braster = rasterize(box, 12, 12)
            inter = np.count_nonzero(bits & braster)
            # pixels of the box falling outside the grid still count toward area
            union = int(bits.sum()) + box.area - inter
            assert mask_box_iou(comp, box) == pytest.approx(inter / union, abs=1e-12)


class TestScaleBox:
    def test_downscale_by_two(self):
        assert scale_box(BBox(4, 8, 12, 16), (32, 32), (16, 16)) == BBox(2, 4, 6, 8)

    def test_never_collapses(self):
        got = scale_box(BBox(1, 1, 2, 2), (32, 32), (8, 8))
        assert got.width >= 1 and got.height >= 1


class TestGenerateProposals:
    def test_single_scale_grid(self):
        props = generate_proposals(32, 32, scales=[16], aspect_ratios=[1.0], stride=0.5)
        # 8-pixel steps: x0 in {0, 8, 16}, same for y0
        assert len(props) == 9
        assert props[0] == BBox(0, 0, 16, 16)
        assert props[1] == BBox(8, 0, 24, 16)
        assert {(b.x0, b.y0) for b in props} == {(x, y) for x in (0, 8, 16) for y in (0, 8, 16)}

    def test_oversized_scale_clips_to_full_image(self):
        props = generate_proposals(20, 20, scales=[64], aspect_ratios=[1.0], stride=0.5)
        assert len(props) == 1
        assert props[0] == BBox(0, 0, 20, 20)

    def test_two_scales_concatenate_scale_major(self):
        small = generate_proposals(32, 32, scales=[16], aspect_ratios=[1.0], stride=0.5)
        big = generate_proposals(32, 32, scales=[32], aspect_ratios=[1.0], stride=0.5)
        both = generate_proposals(32, 32, scales=[16, 32], aspect_ratios=[1.0], stride=0.5)
        assert both.boxes == small.boxes + big.boxes

    def test_deterministic(self):
        a = generate_proposals(48, 32, [8, 14], [0.75, 1.0, 4 / 3], 0.4)
        b = generate_proposals(48, 32, [8, 14], [0.75, 1.0, 4 / 3], 0.4)
        assert a.boxes == b.boxes

    def test_deduplicated(self):
        props = generate_proposals(16, 16, scales=[16, 24], aspect_ratios=[1.0], stride=0.5)
        keys = [(b.x0, b.y0, b.x1, b.y1) for b in props]
        assert len(keys) == len(set(keys))

    def test_bad_stride_rejected(self):
        with pytest.raises(ValueError):
            generate_proposals(32, 32, [16], [1.0], 0.0)


class TestNms:
    def test_single_box(self):
        assert nms([BBox(0, 0, 4, 4)], [0.5], 0.5) == [0]

    def test_identical_boxes_keep_higher_score(self):
        boxes = [BBox(0, 0, 4, 4), BBox(0, 0, 4, 4)]
        assert nms(boxes, [0.9, 0.8], 0.5) == [0]

    def test_tie_prefers_lower_index(self):
        boxes = [BBox(0, 0, 4, 4), BBox(0, 0, 4, 4)]
        assert nms(boxes, [0.7, 0.7], 0.5) == [0]

    def test_matches_quadratic_reference_randomized(self):
        rng = np.random.default_rng(23)
        for _ in range(200):
            n = int(rng.integers(1, 12))
            boxes = [random_box(rng, extent=20) for _ in range(n)]
            scores = rng.random(n)
            assert nms(boxes, scores, 0.5) == nms_reference(boxes, scores, 0.5)

    def test_kept_boxes_form_anti_chain(self):
        rng = np.random.default_rng(29)
        for _ in range(100):
            boxes = [random_box(rng, extent=18) for _ in range(10)]
            scores = rng.random(10)
            kept = nms(boxes, scores, 0.5)
            for i in kept:
                for j in kept:
                    if i != j:
                        assert box_iou(boxes[i], boxes[j]) <= 0.5
