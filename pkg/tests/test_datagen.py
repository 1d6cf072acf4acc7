import json

import numpy as np
import pytest

from sketchpaint.datagen import (DIRECTIONS, DatagenConfig, bezier_partial_mask, blend_masks, build_four_tuple,
                                 canny_sketch, dilate_mask, generate, mask_ladder, partial_sketch,
                                 read_corpus, read_manifest, synth_corpus, write_corpus, write_dataset)
from sketchpaint.datagen.corpus import COLORS
from sketchpaint.datagen.masks import bbox_mask, dilation_kernel
from sketchpaint.datagen.sketch import register_sketch_generator, sketch_generator
from sketchpaint.errors import IngestionError, ParameterError


def iou(a, b):
    return (a & b).sum() / (a | b).sum()


def plus_sign(n=41, arm=3):
    m = np.zeros((n, n), bool)
    c = n // 2
    m[c - arm:c + arm + 1, :] = True
    m[:, c - arm:c + arm + 1] = True
    m[:4, :] = m[-4:, :] = False
    m[:, :4] = m[:, -4:] = False
    return m


def test_dilation_d0_is_identity():
    m0 = plus_sign()
    assert np.array_equal(dilate_mask(m0, 0, 5), m0)


def test_dilation_dD_fills_bbox_for_plus_sign():
    m0 = plus_sign()
    assert iou(dilate_mask(m0, 5, 5), bbox_mask(m0)) >= 0.95


def test_single_pixel_kernel_three():
    m0 = np.zeros((7, 7), bool)
    m0[3, 3] = True
    # a lone pixel has no bbox gap; the ceil term is 0 and the kernel stays 1
    assert dilation_kernel(m0, 1, 5) == 1
    # with a 3x3 kernel the pixel becomes a 3x3 block (clipping aside)
    import cv2
    grown = cv2.dilate(m0.astype(np.uint8), np.ones((3, 3), np.uint8)).astype(bool)
    expected = np.zeros((7, 7), bool)
    expected[2:5, 2:5] = True
    assert np.array_equal(grown, expected)


def test_dilation_ladder_monotone_on_synthetic_masks():
    for s in synth_corpus(10, 64, 3):
        levels = [dilate_mask(s.m0, d, 5) for d in range(6)]
        for a, b in zip(levels, levels[1:]):
            assert not (a & ~b).any()
        assert iou(levels[-1], bbox_mask(s.m0)) >= 0.95


def test_dilation_rejects_bad_d():
    with pytest.raises(ParameterError):
        dilate_mask(plus_sign(), 6, 5)
    with pytest.raises(ValueError):
        dilate_mask(np.zeros((8, 8), bool), 1, 5)


def test_blend_endpoints_exact_and_midpoint_between():
    a = np.zeros((40, 40), bool)
    b = np.zeros((40, 40), bool)
    a[15:25, 15:25] = True
    b[10:30, 10:30] = True
    assert np.array_equal(blend_masks(a, b, 0, 4), a)
    assert np.array_equal(blend_masks(a, b, 4, 4), b)
    mid = blend_masks(a, b, 2, 4)
    assert a.sum() <= mid.sum() <= b.sum()
    with pytest.raises(ParameterError):
        blend_masks(b, a, 2, 4)
    with pytest.raises(ParameterError):
        blend_masks(a, b, 5, 4)


def test_mask_ladder_endpoints_bitwise():
    m0 = synth_corpus(1, 64, 9)[0].m0
    ladder = mask_ladder(m0, 5, 4)
    for d in range(5):
        assert np.array_equal(ladder.get(d, 0), ladder.dilated[d])
        assert np.array_equal(ladder.get(d, 4), ladder.dilated[d + 1])


def test_straight_front_on_full_canvas_takes_left_half():
    full = np.ones((20, 20), bool)
    pm, info = bezier_partial_mask(full, "L2R", 0.5, np.random.default_rng(0), straight=True)
    assert info["coverage"] == 0.5
    assert np.all(pm[:, :10] == 0) and np.all(pm[:, 10:] == 1)


@pytest.mark.parametrize("direction, corrupted", [
    ("R2L", (slice(None), slice(10, None))),
    ("U2D", (slice(None, 10), slice(None))),
    ("D2U", (slice(10, None), slice(None))),
])
def test_straight_front_direction_frames(direction, corrupted):
    full = np.ones((20, 20), bool)
    pm, _ = bezier_partial_mask(full, direction, 0.5, np.random.default_rng(0), straight=True)
    expected = np.ones((20, 20), np.uint8)
    expected[corrupted] = 0
    assert np.array_equal(pm, expected)


def test_partial_mask_coverage_bounds():
    rng = np.random.default_rng(0)
    for s in synth_corpus(8, 64, 1):
        for _ in range(10):
            pm, info = bezier_partial_mask(s.m0, DIRECTIONS[rng.integers(4)], rng.uniform(0.5, 0.6), rng)
            cov = ((pm == 0) & s.m0).sum() / s.m0.sum()
            assert 0.5 <= cov <= 0.61
            assert cov == pytest.approx(info["coverage"])
            assert not ((pm == 0) & ~s.m0).any()


def test_direction_frequencies_balanced():
    samples = synth_corpus(4, 64, 2)
    counts = {d: 0 for d in DIRECTIONS}
    cfg = DatagenConfig(sketch_types=("blank",))
    register_sketch_generator("blank", lambda img: np.zeros(img.shape[:2]), overwrite=True)
    for seed in range(250):
        for s in samples:
            counts[build_four_tuple(s, cfg, seed).provenance["direction"]] += 1
    total = sum(counts.values())
    assert total == 1000
    assert all(c / total >= 0.15 for c in counts.values()), counts


def test_bad_coverage_target_rejected():
    with pytest.raises(ParameterError):
        bezier_partial_mask(plus_sign(), "L2R", 0.7, np.random.default_rng(0))
    with pytest.raises(ParameterError):
        bezier_partial_mask(plus_sign(), "sideways", 0.55, np.random.default_rng(0))


def test_canny_constant_image_is_empty():
    assert not canny_sketch(np.full((32, 32, 3), 0.4)).any()


def test_canny_vertical_step_gives_thin_line():
    img = np.zeros((32, 32, 3))
    img[:, 16:] = 1.0
    edges = canny_sketch(img)
    interior = edges[4:-4]
    assert np.all(interior.sum(axis=1) == 1)
    cols = np.nonzero(interior)[1]
    assert np.all(np.abs(cols - 15.5) <= 1)


def test_canny_edges_lie_on_strong_enough_gradients():
    from sketchpaint.datagen.sketch import gradients
    img = synth_corpus(1, 64, 4)[0].image
    edges = canny_sketch(img, 0.1, 0.3)
    gx, gy = gradients(img, 1.0)
    mag = np.hypot(gx, gy)
    assert edges.any()
    assert np.all(mag[edges > 0] >= 0.1 * mag.max() - 1e-12)
    with pytest.raises(ParameterError):
        canny_sketch(img, 0.5, 0.2)


def test_partial_sketch_matches_pixel_loop():
    rng = np.random.default_rng(0)
    pm, m0, s = (rng.random((12, 12)) > 0.5 for _ in range(3))
    out = partial_sketch(pm, m0, s)
    for i in range(12):
        for j in range(12):
            want = 1.0 if (not pm[i, j]) and m0[i, j] and s[i, j] else 0.0
            assert out[i, j] == want


def test_sketch_registry():
    with pytest.raises(ParameterError):
        sketch_generator("nope")
    with pytest.raises(ParameterError):
        register_sketch_generator("canny", lambda x: x)


def test_four_tuple_support_and_determinism():
    s = synth_corpus(1, 64, 6)[0]
    a, b = build_four_tuple(s, seed=3), build_four_tuple(s, seed=3)
    assert np.array_equal(a.partial_mask, b.partial_mask)
    assert np.array_equal(a.partial_sketch, b.partial_sketch)
    assert a.provenance == b.provenance
    assert not ((a.partial_sketch > 0) & ((a.partial_mask == 1) | ~s.m0)).any()
    assert np.array_equal(a.masked_image, s.image * a.partial_mask[..., None])


def test_synth_corpus_captions_name_the_color():
    for s in synth_corpus(20, 64, 0):
        assert s.attributes["color"] in s.caption.split()
        assert s.attributes["color"] in COLORS
        assert s.m0.any()


def test_corpus_and_manifest_round_trip(tmp_path):
    samples = synth_corpus(3, 64, 0)
    write_corpus(samples, tmp_path / "corpus")
    back = read_corpus(tmp_path / "corpus")
    assert [s.caption for s in back] == [s.caption for s in samples]
    assert all(np.array_equal(a.m0, b.m0) for a, b in zip(samples, back))
    manifest = write_dataset(generate(back, seed=1), tmp_path / "ds")
    recs = read_manifest(manifest)
    assert [r.id for r in recs] == [s.id for s in samples]
    first = json.loads(manifest.read_text().splitlines()[0])
    assert list(first)[:3] == ["id", "image", "instance_mask"]
    pm = recs[0].load("partial_mask")
    ps = recs[0].load("partial_sketch")
    assert not ((ps > 0) & pm).any()


def test_manifest_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"id": "a", "caption": "x", "image": "i", "instance_mask": "m", "partial_mask": "p"}\n{oops\n')
    with pytest.raises(IngestionError) as err:
        read_manifest(p)
    assert err.value.line == 2
