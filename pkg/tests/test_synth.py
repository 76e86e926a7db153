"""Scene generation invariants, camera bounds, and dataset round-trips."""

import numpy as np
import pytest

from selfsupdet.synth import (SceneSpec, _pick_sprite_colors, camera_track,
                              generate_dataset, generate_sequence, hwc_to_chw,
                              load_dataset, render_background_canvas, save_dataset,
                              two_sprite_image)


def _tight_box_of(mask):
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    return ((xs.min() + xs.max() + 1) / (2 * w), (ys.min() + ys.max() + 1) / (2 * h),
            (xs.max() + 1 - xs.min()) / w, (ys.max() + 1 - ys.min()) / h)


@pytest.mark.parametrize("field,value", [
    ("background", "plasma"),
    ("camera", "drone"),
    ("sprite", "mesh"),
    ("scale_range", (0.0, 0.4)),
    ("scale_range", (0.5, 0.98)),
    ("width", 60),
    ("width", 130),
])
def test_spec_validation_rejects(field, value):
    spec = SceneSpec(**{field: value})
    with pytest.raises(ValueError):
        spec.validate()


def test_static_camera_background_constant_across_frames():
    samples = generate_sequence(SceneSpec(camera="static", seed=3), n_frames=2)
    assert np.array_equal(samples[0].clean_background, samples[1].clean_background)


def test_handheld_translation_bounded():
    spec = SceneSpec(camera="handheld", seed=5)
    track = camera_track(spec, 200, np.random.default_rng(5))
    mags = np.hypot(track[:, 0], track[:, 1])
    assert mags.max() <= 0.05 * spec.width + 1e-9
    assert np.abs(track[:, 2]).max() <= np.deg2rad(1.5) + 1e-9


def test_ptz_track_is_smooth_similarity_drift():
    spec = SceneSpec(camera="ptz", seed=6)
    track = camera_track(spec, 96, np.random.default_rng(6))
    deltas = np.abs(np.diff(track[:, :2], axis=0))
    assert deltas.max() < 0.05 * spec.width  # drift, not jumps
    assert np.all(track[:, 3] >= 0.9) and np.all(track[:, 3] <= 1.1)
    assert np.abs(track[:, :2]).max() <= 0.15 * spec.width + 1e-9


def test_static_track_is_identity():
    track = camera_track(SceneSpec(camera="static"), 8, np.random.default_rng(0))
    assert np.array_equal(track[:, :3], np.zeros((8, 3)))
    assert np.array_equal(track[:, 3], np.ones(8))


@pytest.mark.parametrize("sprite", ["blob", "polygon", "textured"])
def test_sample_invariants(sprite):
    spec = SceneSpec(sprite=sprite, background="composite", seed=11)
    for s in generate_sequence(spec, n_frames=4):
        # mask marks exactly the composited pixels
        outside = ~s.gt_mask
        assert np.array_equal(s.image[outside], s.clean_background[outside])
        assert s.gt_mask.sum() > 0
        # tight-box invariant, exact
        cx, cy, w, h = _tight_box_of(s.gt_mask)
        assert (s.gt_box.cx, s.gt_box.cy, s.gt_box.w, s.gt_box.h) == (cx, cy, w, h)
        # sprite fully inside: no mask pixels on the border
        assert not s.gt_mask[0, :].any() and not s.gt_mask[-1, :].any()
        assert not s.gt_mask[:, 0].any() and not s.gt_mask[:, -1].any()
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_flat_sprite_is_single_color():
    spec = SceneSpec(sprite="blob", seed=12)
    s = generate_sequence(spec, 1)[0]
    pixels = s.image[s.gt_mask]
    assert np.all(pixels == pixels[0])


def test_generation_deterministic():
    spec = SceneSpec(camera="handheld", sprite="textured", seed=21)
    a = generate_sequence(spec, 3)
    b = generate_sequence(spec, 3)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.gt_mask, sb.gt_mask)
        assert sa.gt_box == sb.gt_box


def test_dataset_seeds_sequences_independently():
    spec = SceneSpec(seed=30)
    ds = generate_dataset(spec, n_sequences=2, frames_per_sequence=2)
    assert [s.sequence for s in ds] == [0, 0, 1, 1]
    direct = generate_sequence(spec, 2, sequence_id=1)
    assert np.array_equal(ds[2].image, direct[0].image)
    assert not np.array_equal(ds[0].image, ds[2].image)


@pytest.mark.parametrize("family", ["gradient", "checker", "value-noise", "composite"])
def test_background_families_render_in_range(family):
    spec = SceneSpec(background=family, seed=7)
    canvas = render_background_canvas(spec, np.random.default_rng(7))
    assert canvas.shape == (256, 256, 3)
    assert canvas.min() >= 0.0 and canvas.max() <= 1.0


def test_sprite_palette_distance():
    rng = np.random.default_rng(8)
    for _ in range(20):
        mean = rng.uniform(0.2, 0.8, size=3)
        colors = _pick_sprite_colors(rng, mean, 2)
        for c in colors:
            assert np.mean(np.abs(c - mean)) >= 0.2


def test_two_sprite_image_separated():
    spec = SceneSpec(seed=9, scale_range=(0.15, 0.25))
    image, boxes, masks = two_sprite_image(spec, np.random.default_rng(9))
    assert len(boxes) == 2 and len(masks) == 2
    assert not (masks[0] & masks[1]).any()
    # nearest pixels of the two sprites stay at least min_gap apart
    (ay, ax), (by, bx) = np.nonzero(masks[0]), np.nonzero(masks[1])
    d2 = (ay[:, None] - by[None, :]) ** 2 + (ax[:, None] - bx[None, :]) ** 2
    assert np.sqrt(d2.min()) / 128 >= 0.15
    assert image.shape == (128, 128, 3)


def test_round_trip_through_disk(tmp_path):
    spec = SceneSpec(camera="ptz", sprite="polygon", seed=13)
    samples = generate_dataset(spec, 2, 2)
    save_dataset(samples, str(tmp_path))
    loaded = load_dataset(str(tmp_path))
    assert len(loaded) == len(samples)
    for orig, back in zip(samples, loaded):
        assert back.sequence == orig.sequence and back.frame == orig.frame
        for field in ("cx", "cy", "w", "h"):
            assert abs(getattr(back.gt_box, field) - getattr(orig.gt_box, field)) <= 1e-9
        assert np.array_equal(back.gt_mask, orig.gt_mask)
        assert np.abs(back.image - orig.image).max() <= 1.0 / 255.0
        assert np.abs(back.clean_background - orig.clean_background).max() <= 1.0 / 255.0
        outside = ~back.gt_mask
        assert np.array_equal(back.image[outside], back.clean_background[outside])


def test_load_missing_index(tmp_path):
    with pytest.raises(FileNotFoundError, match="index.csv"):
        load_dataset(str(tmp_path))


def test_load_malformed_row_reports_line(tmp_path):
    samples = generate_sequence(SceneSpec(seed=1), 1)
    save_dataset(samples, str(tmp_path))
    index = tmp_path / "index.csv"
    lines = index.read_text().splitlines()
    lines[1] = lines[1].replace(lines[1].split(",")[2], "not-a-number", 1)
    index.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match=":2:"):
        load_dataset(str(tmp_path))


def test_load_missing_png(tmp_path):
    samples = generate_sequence(SceneSpec(seed=1), 1)
    save_dataset(samples, str(tmp_path))
    (tmp_path / "seq0000_frame0000_mask.png").unlink()
    with pytest.raises(FileNotFoundError, match="mask"):
        load_dataset(str(tmp_path))


def test_hwc_to_chw():
    img = np.zeros((4, 6, 3), dtype=np.float32)
    img[1, 2, 0] = 1.0
    chw = hwc_to_chw(img)
    assert chw.shape == (3, 4, 6)
    assert chw[0, 1, 2] == 1.0 and chw.flags["C_CONTIGUOUS"]
