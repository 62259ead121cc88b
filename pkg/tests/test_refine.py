from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xsyn.grid import rasterize_box
from xsyn.noise import ScriptedRng, uniform_field
from xsyn.refine import (
    DiscriminativeRegion,
    Polarity,
    PointPrompt,
    PromptSet,
    discriminative_region,
    median_point,
    mps_sample,
    refine_annotation,
    topk_sample,
)


# Independent oracle: materialize (activation, row, col) triples, full sort,
# recursive lower-median extraction. Kept free of the implementation's
# helper functions on purpose.
def mps_oracle(region_mask, attention, n):
    triples = sorted(
        (float(attention[r, c]), int(r), int(c))
        for r, c in zip(*np.nonzero(region_mask))
    )
    picked = []

    def recurse(lst, depth):
        if depth == 0 or not lst:
            return
        mid = (len(lst) - 1) // 2
        picked.append((lst[mid][1], lst[mid][2]))
        recurse(lst[:mid], depth - 1)
        recurse(lst[mid + 1 :], depth - 1)

    recurse(triples, n)
    return picked


def background_oracle(region_mask, box_mask, attention):
    outside = box_mask & ~region_mask
    triples = sorted(
        (float(attention[r, c]), int(r), int(c)) for r, c in zip(*np.nonzero(outside))
    )
    return (triples[0][1], triples[0][2]) if triples else None


def _region(box, shape, mask=None) -> DiscriminativeRegion:
    h, w = shape
    if mask is None:
        mask = rasterize_box(box, w, h)
    return DiscriminativeRegion(mask, box)


def _fg(points):
    return [p for p in points if p.polarity is Polarity.FOREGROUND]


def _coords(points):
    return [(int(p.y - 0.5), int(p.x - 0.5)) for p in points]


def _random_instance(seed: int, max_side: int = 32):
    rng = ScriptedRng(f"mps|{seed}")
    h = rng.randint(4, max_side + 1)
    w = rng.randint(4, max_side + 1)
    # Activations on a 1/256 grid: ties happen, and strictly increasing
    # transforms cannot merge distinct values.
    raw = uniform_field(f"mps|map|{seed}", (h, w))
    attention = (np.floor(raw * 256) / 256).astype(np.float32)
    x1 = rng.randint(0, w - 2)
    y1 = rng.randint(0, h - 2)
    x2 = rng.randint(x1 + 2, w + 1)
    y2 = rng.randint(y1 + 2, h + 1)
    box = (float(x1), float(y1), float(x2), float(y2))
    box_mask = rasterize_box(box, w, h)
    # Region: roughly the inner half of the box.
    ix1, iy1 = x1 + (x2 - x1) // 4, y1 + (y2 - y1) // 4
    ix2, iy2 = max(ix1 + 1, x2 - (x2 - x1) // 4), max(iy1 + 1, y2 - (y2 - y1) // 4)
    region_mask = rasterize_box((ix1, iy1, ix2, iy2), w, h) & box_mask
    return attention, box, box_mask, region_mask


class TestMedianPoint:
    def test_odd_length(self):
        values = [((0, i), a) for i, a in enumerate([0.1, 0.2, 0.3, 0.4, 0.5])]
        assert median_point(values) == (0, 2)

    def test_even_length_lower_median(self):
        values = [((0, i), a) for i, a in enumerate([0.1, 0.2, 0.3, 0.4])]
        assert median_point(values) == (0, 1)

    def test_large_random_matches_sort_oracle(self):
        rng = ScriptedRng("median")
        values = [
            ((rng.randint(0, 40), rng.randint(0, 40)), rng.randint(0, 50) / 50)
            for _ in range(1000)
        ]
        triples = sorted((a, rc[0], rc[1]) for rc, a in values)
        mid = triples[(len(triples) - 1) // 2]
        assert median_point(values) == (mid[1], mid[2])


class TestMpsSample:
    def test_n4_gives_15_foreground_plus_background(self):
        attention = uniform_field("mps|n4", (32, 32)).astype(np.float32)
        box = (4.0, 4.0, 24.0, 24.0)
        region = DiscriminativeRegion(
            rasterize_box((8.0, 8.0, 20.0, 20.0), 32, 32), box
        )
        points = mps_sample(region, attention, 4)
        assert len(points) == 16
        assert len(_fg(points)) == 15
        assert sum(p.polarity is Polarity.BACKGROUND for p in points) == 1

    def test_seven_distinct_values_n2(self):
        attention = np.zeros((1, 9), dtype=np.float32)
        attention[0, 1:8] = [0.7, 0.1, 0.5, 0.3, 0.6, 0.2, 0.4]
        mask = np.zeros((1, 9), dtype=bool)
        mask[0, 1:8] = True
        region = DiscriminativeRegion(mask, (0.0, 0.0, 9.0, 1.0))
        points = _fg(mps_sample(region, attention, 2))
        acts = sorted(attention[r, c] for r, c in _coords(points))
        # median of all 7 = 0.4; medians of the lower/upper 3 = 0.2 / 0.6
        assert acts == [np.float32(0.2), np.float32(0.4), np.float32(0.6)]

    def test_n0_is_box_only(self):
        attention = uniform_field("mps|n0", (16, 16)).astype(np.float32)
        region = _region((2.0, 2.0, 10.0, 10.0), (16, 16))
        assert mps_sample(region, attention, 0) == []

    def test_exhausted_branches_emit_fewer_points(self):
        attention = np.zeros((4, 4), dtype=np.float32)
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, :3] = True  # 3 region pixels, n=3 wants 7
        region = DiscriminativeRegion(mask, (0.0, 0.0, 4.0, 4.0))
        points = mps_sample(region, attention, 3)
        assert len(_fg(points)) == 3

    @pytest.mark.parametrize("seed", range(40))
    @pytest.mark.parametrize("n", [1, 3, 5])
    def test_matches_brute_force_oracle(self, seed, n):
        attention, box, box_mask, region_mask = _random_instance(seed)
        region = DiscriminativeRegion(region_mask, box)
        points = mps_sample(region, attention, n)
        expected = mps_oracle(region_mask, attention, n)
        assert _coords(_fg(points)) == expected
        bg = [p for p in points if p.polarity is Polarity.BACKGROUND]
        expected_bg = background_oracle(region_mask, box_mask, attention)
        assert (_coords(bg)[0] if bg else None) == expected_bg

    @given(st.integers(0, 10**6), st.integers(1, 5))
    @settings(max_examples=60, deadline=None)
    def test_point_count_law(self, seed, n):
        attention, box, box_mask, region_mask = _random_instance(seed, max_side=64)
        if int(region_mask.sum()) < 2**n - 1:
            return
        region = DiscriminativeRegion(region_mask, box)
        points = mps_sample(region, attention, n)
        assert len(_fg(points)) == 2**n - 1
        if (box_mask & ~region_mask).any():
            assert len(points) == 2**n

    @given(st.integers(0, 10**6))
    @settings(max_examples=40, deadline=None)
    def test_containment(self, seed):
        attention, box, box_mask, region_mask = _random_instance(seed)
        region = DiscriminativeRegion(region_mask, box)
        for p in mps_sample(region, attention, 3):
            r, c = int(p.y - 0.5), int(p.x - 0.5)
            if p.polarity is Polarity.FOREGROUND:
                assert region_mask[r, c]
            else:
                assert box_mask[r, c] and not region_mask[r, c]

    @given(st.integers(0, 10**6))
    @settings(max_examples=40, deadline=None)
    def test_monotone_invariance(self, seed):
        attention, box, _, region_mask = _random_instance(seed)
        region = DiscriminativeRegion(region_mask, box)
        transformed = (attention.astype(np.float64) ** 3 + attention).astype(np.float32)
        a = mps_sample(region, attention, 4)
        b = mps_sample(region, transformed, 4)
        assert [(p.x, p.y, p.polarity) for p in a] == [(p.x, p.y, p.polarity) for p in b]


class TestTopkSample:
    def test_k1_is_argmax_plus_background(self):
        attention, box, box_mask, region_mask = _random_instance(11)
        region = DiscriminativeRegion(region_mask, box)
        points = topk_sample(region, attention, 1)
        fg = _fg(points)
        assert len(fg) == 1 and len(points) == 2
        triples = sorted(
            (float(attention[r, c]), r, c) for r, c in zip(*np.nonzero(region_mask))
        )
        assert _coords(fg)[0] == (triples[-1][1], triples[-1][2])

    def test_k15_takes_top_15_of_20(self):
        attention = np.zeros((1, 24), dtype=np.float32)
        attention[0, 2:22] = np.linspace(0.05, 1.0, 20, dtype=np.float32)
        mask = np.zeros((1, 24), dtype=bool)
        mask[0, 2:22] = True
        region = DiscriminativeRegion(mask, (0.0, 0.0, 24.0, 1.0))
        points = _fg(topk_sample(region, attention, 15))
        got = sorted(attention[r, c] for r, c in _coords(points))
        expected = sorted(attention[0, 2:22])[-15:]
        assert got == expected

    def test_k_saturates_to_region(self):
        attention, box, _, region_mask = _random_instance(13)
        region = DiscriminativeRegion(region_mask, box)
        points = _fg(topk_sample(region, attention, 10**6))
        assert len(points) == int(region_mask.sum())


class TestDiscriminativeRegion:
    def test_rect_inside_box_recovered_exactly(self, mock_backend):
        attention = np.zeros((64, 64), dtype=np.float32)
        attention[20:30, 16:28] = 1.0
        box = (8.0, 12.0, 40.0, 40.0)
        region = discriminative_region(attention, box, mock_backend)
        assert not region.fallback
        assert np.array_equal(region.mask, rasterize_box((16, 20, 28, 30), 64, 64))

    def test_constant_map_falls_back_to_box(self, mock_backend):
        attention = np.zeros((32, 32), dtype=np.float32)
        box = (4.0, 4.0, 20.0, 24.0)
        region = discriminative_region(attention, box, mock_backend)
        assert region.fallback
        assert np.array_equal(region.mask, rasterize_box(box, 32, 32))

    def test_straddling_blob_clipped_to_box(self, mock_backend):
        attention = np.zeros((64, 64), dtype=np.float32)
        attention[10:30, 10:30] = 1.0
        box = (16.0, 16.0, 48.0, 48.0)
        region = discriminative_region(attention, box, mock_backend)
        assert not region.fallback
        expected = rasterize_box((10, 10, 30, 30), 64, 64) & rasterize_box(box, 64, 64)
        assert np.array_equal(region.mask, expected)


class TestRefineAnnotation:
    def _image_with_rect(self, rect, size=64, level=0.75):
        img = np.full((size, size), 0.1, dtype=np.float32)
        x1, y1, x2, y2 = rect
        img[y1:y2, x1:x2] = level
        return np.stack([img] * 3, axis=-1)

    def test_tight_box_of_planted_mask(self, mock_backend):
        image = self._image_with_rect((12, 20, 34, 41))
        prompt = PromptSet(
            (PointPrompt(20.5, 30.5, Polarity.FOREGROUND),), (8.0, 16.0, 40.0, 44.0)
        )
        box, fell_back = refine_annotation(image, prompt, mock_backend)
        assert not fell_back
        assert box == (12.0, 20.0, 34.0, 41.0)

    def test_object_filling_box_is_fixed_point(self, mock_backend):
        image = self._image_with_rect((16, 16, 48, 48))
        prompt = PromptSet(
            (PointPrompt(30.5, 30.5, Polarity.FOREGROUND),), (16.0, 16.0, 48.0, 48.0)
        )
        box, fell_back = refine_annotation(image, prompt, mock_backend)
        assert not fell_back
        assert box == (16.0, 16.0, 48.0, 48.0)

    def test_empty_mask_falls_back_to_grounding_box(self, mock_backend):
        image = np.full((32, 32, 3), 0.5, dtype=np.float32)
        prompt = PromptSet(
            (PointPrompt(10.5, 10.5, Polarity.FOREGROUND),), (4.0, 4.0, 20.0, 20.0)
        )
        box, fell_back = refine_annotation(image, prompt, mock_backend)
        assert fell_back
        assert box == (4.0, 4.0, 20.0, 20.0)

    def test_result_always_inside_image(self, mock_backend):
        image = self._image_with_rect((0, 0, 64, 64), level=0.9)
        image[30:34, 30:34] = 0.1
        prompt = PromptSet(
            (PointPrompt(2.5, 2.5, Polarity.FOREGROUND),), (0.0, 0.0, 64.0, 64.0)
        )
        box, _ = refine_annotation(image, prompt, mock_backend)
        assert 0 <= box[0] < box[2] <= 64 and 0 <= box[1] < box[3] <= 64


def test_prompt_set_rejects_two_background_points():
    with pytest.raises(ValueError):
        PromptSet(
            (
                PointPrompt(1.0, 1.0, Polarity.BACKGROUND),
                PointPrompt(2.0, 2.0, Polarity.BACKGROUND),
            ),
            (0.0, 0.0, 4.0, 4.0),
        )
