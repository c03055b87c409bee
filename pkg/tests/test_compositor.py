import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roivqa.compositor import (
    GREEN,
    PALETTE,
    PURPLE,
    RED,
    YELLOW,
    AlphaPolicy,
    Color,
    OverlayBox,
    OverlaySpec,
    blend,
    blend_arrays,
    composite_item,
    outline_box,
    render_overlay,
    sample_alpha,
)
from roivqa.corpus import ImageRecord


def blend_oracle(x: int, p: int, alpha: int) -> int:
    """Exact rational blend, rounded half up."""
    v = Fraction(alpha * p + (255 - alpha) * x, 255)
    return math.floor(v + Fraction(1, 2))


def ring_pixels(bbox, t):
    x1, y1, x2, y2 = bbox
    return {(x, y) for x in range(x1, x2) for y in range(y1, y2)
            if min(x - x1, x2 - 1 - x, y - y1, y2 - 1 - y) < t}


def flat_image(w, h, value=(100, 100, 100), image_id="img"):
    arr = np.empty((h, w, 3), dtype=np.uint8)
    arr[:] = value
    return ImageRecord.from_array(image_id, arr)


def test_palette_values():
    assert [c.rgb for c in PALETTE] == [(255, 255, 0), (128, 0, 128), (0, 255, 0), (255, 0, 0)]
    assert [c.name for c in PALETTE] == ["Yellow", "Purple", "Green", "Red"]


def test_filled_box_area():
    mask, layer = render_overlay(4, 4, OverlaySpec((OverlayBox((0, 0, 2, 2), RED, "filled"),)))
    assert mask.sum() == 4
    assert all(tuple(px) == (255, 0, 0) for px in layer[mask])


def test_outline_ring_matches_enumeration():
    mask, _ = render_overlay(8, 8, OverlaySpec((OverlayBox((0, 0, 4, 4), RED, "outline", 1),)))
    expected = ring_pixels((0, 0, 4, 4), 1)
    assert len(expected) == 12
    assert {(x, y) for y, x in zip(*np.nonzero(mask))} == expected


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_outline_ring_property(data):
    x1 = data.draw(st.integers(0, 20))
    y1 = data.draw(st.integers(0, 20))
    w = data.draw(st.integers(2, 12))
    h = data.draw(st.integers(2, 12))
    t = data.draw(st.integers(1, min(w, h) // 2))
    box = (x1, y1, x1 + w, y1 + h)
    mask, _ = render_overlay(40, 40, OverlaySpec((OverlayBox(box, GREEN, "outline", t),)))
    assert {(x, y) for y, x in zip(*np.nonzero(mask))} == ring_pixels(box, t)


def test_empty_spec_all_zero():
    mask, layer = render_overlay(5, 3, OverlaySpec())
    assert not mask.any() and not layer.any()


def test_later_boxes_paint_over():
    spec = OverlaySpec((OverlayBox((0, 0, 4, 4), RED, "filled"), OverlayBox((2, 2, 4, 4), GREEN, "filled")))
    _, layer = render_overlay(4, 4, spec)
    assert tuple(layer[3, 3]) == GREEN.rgb and tuple(layer[0, 0]) == RED.rgb


def test_box_out_of_bounds():
    with pytest.raises(ValueError, match="out of bounds"):
        render_overlay(4, 4, OverlaySpec((OverlayBox((0, 0, 5, 2), RED, "filled"),)))


def test_thickness_limit():
    with pytest.raises(ValueError, match="thickness"):
        OverlayBox((0, 0, 4, 4), RED, "outline", 3)


def test_outline_box_clamps_thickness():
    assert outline_box((0, 0, 4, 10), RED, 3).thickness == 2
    assert outline_box((0, 0, 1, 10), RED, 3).style == "filled"


def test_blend_examples():
    base = flat_image(2, 2)
    layer = render_overlay(2, 2, OverlaySpec((OverlayBox((0, 0, 2, 2), RED, "filled"),)))
    assert blend(base, layer, 0).pixels == base.pixels
    assert np.all(blend(base, layer, 255).array() == (255, 0, 0))
    assert tuple(blend(base, layer, 128).array()[0, 0]) == (178, 50, 50)


def test_blend_matches_oracle_exhaustive_alpha():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, size=(1, 300, 3), dtype=np.uint8)
    p = rng.integers(0, 256, size=(1, 300, 3), dtype=np.uint8)
    mask = np.ones((1, 300), dtype=bool)
    for alpha in range(256):
        out = blend_arrays(x, mask, p, alpha)
        expected = np.vectorize(lambda a, b: blend_oracle(int(a), int(b), alpha))(x, p)
        assert np.array_equal(out, expected), alpha


def test_blend_dimension_mismatch():
    base = flat_image(3, 3)
    with pytest.raises(ValueError, match="mismatch"):
        blend(base, render_overlay(2, 2, OverlaySpec()), 10)


@settings(max_examples=100, deadline=None)
@given(x=st.integers(0, 255), p=st.integers(0, 255))
def test_blend_monotone_in_alpha(x, p):
    mask = np.ones((1, 1), dtype=bool)
    base = np.full((1, 1, 3), x, dtype=np.uint8)
    marker = np.full((1, 1, 3), p, dtype=np.uint8)
    outs = [int(blend_arrays(base, mask, marker, a)[0, 0, 0]) for a in range(256)]
    if p > x:
        assert outs == sorted(outs)
    elif p < x:
        assert outs == sorted(outs, reverse=True)
    assert outs[0] == x and outs[255] == p


@settings(max_examples=30, deadline=None)
@given(alpha=st.integers(0, 255))
def test_uncovered_pixels_untouched(alpha):
    rng = np.random.default_rng(alpha)
    base = ImageRecord.from_array("b", rng.integers(0, 256, size=(10, 10, 3), dtype=np.uint8))
    spec = OverlaySpec((OverlayBox((2, 2, 8, 8), PURPLE, "outline", 1),))
    mask, layer = render_overlay(10, 10, spec)
    out = blend(base, (mask, layer), alpha).array()
    assert np.array_equal(out[~mask], base.array()[~mask])


def test_alpha_policy_validation():
    with pytest.raises(ValueError):
        AlphaPolicy.fixed(256)
    with pytest.raises(ValueError):
        AlphaPolicy.dynamic(200, 100)
    assert AlphaPolicy.parse("dynamic") == AlphaPolicy.dynamic(96, 255)
    assert AlphaPolicy.parse("128") == AlphaPolicy.fixed(128)
    assert AlphaPolicy.parse("dynamic:10:20") == AlphaPolicy.dynamic(10, 20)


def test_sample_alpha_fixed():
    assert all(sample_alpha(AlphaPolicy.fixed(96), s, f"q{s}") == 96 for s in range(50))


def test_sample_alpha_dynamic_deterministic():
    pol = AlphaPolicy.dynamic()
    assert sample_alpha(pol, 5, "q1") == sample_alpha(pol, 5, "q1")


def test_sample_alpha_dynamic_distribution():
    pol = AlphaPolicy.dynamic(96, 255)
    draws = [sample_alpha(pol, 2024, f"qa-{i}") for i in range(10_000)]
    assert min(draws) >= 96 and max(draws) <= 255
    assert abs(np.mean(draws) - 175.5) <= 3
    # every value in the range shows up
    assert set(draws) == set(range(96, 256))


def test_composite_item_zero_regions():
    base = flat_image(6, 6)
    ci = composite_item(base, [], AlphaPolicy.fixed(200), 0, "q")
    assert ci.pixels == base.pixels and ci.alpha_used == 200


def test_composite_item_filled_full_opacity():
    base = flat_image(6, 6)
    ci = composite_item(base, [OverlayBox((1, 1, 4, 4), YELLOW, "filled")], AlphaPolicy.fixed(255), 0, "q")
    assert np.all(ci.array()[1:4, 1:4] == YELLOW.rgb)


def test_composite_item_four_palette_boxes_per_pixel_oracle():
    rng = np.random.default_rng(7)
    base = ImageRecord.from_array("b", rng.integers(0, 256, size=(40, 40, 3), dtype=np.uint8))
    boxes = [OverlayBox((0, 0, 10, 10), YELLOW, "outline", 2), OverlayBox((12, 0, 22, 10), PURPLE, "outline", 2),
             OverlayBox((0, 12, 10, 30), GREEN, "outline", 3), OverlayBox((5, 5, 30, 30), RED, "outline", 1)]
    ci = composite_item(base, boxes, AlphaPolicy.fixed(128), 0, "q")
    out = ci.array()
    src = base.array()
    for y in range(40):
        for x in range(40):
            color = None
            for b in boxes:  # last painter wins
                if (x, y) in ring_pixels(b.bbox, b.thickness):
                    color = b.color.rgb
            for c in range(3):
                expected = src[y, x, c] if color is None else blend_oracle(int(src[y, x, c]), color[c], 128)
                assert out[y, x, c] == expected


def test_composite_item_pure():
    rng = np.random.default_rng(1)
    base = ImageRecord.from_array("b", rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8))
    boxes = [OverlayBox((2, 2, 12, 12), RED, "outline", 2)]
    a = composite_item(base, boxes, AlphaPolicy.dynamic(), 9, "qx")
    b = composite_item(base, boxes, AlphaPolicy.dynamic(), 9, "qx")
    assert a == b


def test_color_range():
    with pytest.raises(ValueError):
        Color(256, 0, 0)
