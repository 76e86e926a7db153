"""Reconstruction loss, objective routing, and prior term behavior."""

import numpy as np
import pytest

from selfsupdet import objectives as obj
from selfsupdet.autodiff.tensor import Tensor, constant, no_grad, parameter
from selfsupdet.estimator import draw_candidate
from selfsupdet.inpainter import Inpainter
from selfsupdet.proposal import Detector, ProposalGrid, decode_box
from selfsupdet.segmenter import SegAutoencoder
from selfsupdet.synth import SceneSpec, generate_sequence, hwc_to_chw
from selfsupdet.transformer import BBox


def _images(rng, n=1, size=32, dtype=np.float64):
    return rng.uniform(0.1, 0.9, size=(n, 3, size, size)).astype(dtype)


# -- reconstruction loss --------------------------------------------------------


def test_identical_images_score_zero():
    rng = np.random.default_rng(0)
    a = constant(_images(rng))
    pixel, perceptual = obj.recon_terms(a, a)
    assert float(pixel.data) == 0.0
    assert float(perceptual.data) == 0.0
    assert float(obj.recon_loss(a, a).data) == 0.0


def test_constant_offset_gives_squared_pixel_term():
    rng = np.random.default_rng(1)
    b = _images(rng)
    a = constant(b + 0.1)
    pixel, _ = obj.recon_terms(a, constant(b))
    assert abs(float(pixel.data) - 0.01) < 1e-12


def test_pixel_term_invariant_to_region_area():
    # Constant per-pixel residual: the mean over any region is the same.
    rng = np.random.default_rng(2)
    b = _images(rng)
    a = constant(b + 0.2)
    full = np.ones((1, 1, 32, 32))
    half = np.zeros((1, 1, 32, 32))
    half[:, :, :, :16] = 1.0
    p_full, _ = obj.recon_terms(a, constant(b), region=full)
    p_half, _ = obj.recon_terms(a, constant(b), region=half)
    assert abs(float(p_full.data) - float(p_half.data)) < 1e-12
    assert abs(float(p_full.data) - 0.04) < 1e-12


def test_loss_invariant_to_region_scaling():
    # Doubling the region weights cancels in the weighted mean.
    rng = np.random.default_rng(3)
    a = constant(_images(rng))
    b = constant(_images(rng))
    region = (np.random.default_rng(4).uniform(size=(1, 1, 32, 32)) > 0.5).astype(float)
    l1 = float(obj.recon_loss(a, b, region=region).data)
    l2 = float(obj.recon_loss(a, b, region=2.0 * region).data)
    assert abs(l1 - l2) < 1e-12


def test_empty_region_rejected():
    rng = np.random.default_rng(5)
    a = constant(_images(rng))
    with pytest.raises(ValueError, match="no pixels"):
        obj.recon_loss(a, a, region=np.zeros((1, 1, 32, 32)))


def test_region_shape_rejected():
    rng = np.random.default_rng(6)
    a = constant(_images(rng))
    with pytest.raises(ValueError, match="region"):
        obj.recon_loss(a, a, region=np.ones((1, 1, 16, 16)))


def test_residual_outside_region_is_ignored():
    # Feature extraction is local, so a change far from the region cannot
    # bleed into its score.
    rng = np.random.default_rng(7)
    b = _images(rng)
    a = b.copy()
    a[:, :, 24:, 24:] += 0.5
    region = np.zeros((1, 1, 32, 32))
    region[:, :, :8, :8] = 1.0
    loss = obj.recon_loss(constant(a), constant(b), region=region)
    assert abs(float(loss.data)) < 1e-12


def test_loss_is_symmetric():
    rng = np.random.default_rng(8)
    a = constant(_images(rng))
    b = constant(_images(rng))
    assert float(obj.recon_loss(a, b).data) == float(obj.recon_loss(b, a).data)


def test_odd_image_sides_rejected():
    rng = np.random.default_rng(9)
    a = constant(rng.uniform(size=(1, 3, 31, 31)))
    with pytest.raises(ValueError, match="even"):
        obj.recon_loss(a, a)


# -- prior terms ----------------------------------------------------------------


def _grid_from(logits, raw):
    g = int(np.sqrt(len(logits)))
    probs = np.exp(logits - np.max(logits))
    probs = probs / probs.sum()
    return ProposalGrid(g, constant(probs), constant(np.asarray(raw, dtype=np.float64)),
                        logits=constant(np.asarray(logits, dtype=np.float64)))


def test_prior_zero_outputs_scores_zero():
    grid = _grid_from(np.zeros(4), np.zeros((4, 4)))
    assert float(obj.prior_terms(grid).data) == 0.0


def test_prior_saturated_mask_scores_mask_weight():
    grid = _grid_from(np.zeros(4), np.zeros((4, 4)))
    mask = constant(np.ones((1, 1, 32, 32)))
    got = float(obj.prior_terms(grid, mask).data)
    assert abs(got - obj.PRIOR_MASK) < 1e-12


def test_prior_weighs_sizes_harder_than_offsets():
    offsets_only = np.zeros((4, 4))
    offsets_only[:, :2] = 1.0
    sizes_only = np.zeros((4, 4))
    sizes_only[:, 2:] = 1.0
    p_off = float(obj.prior_terms(_grid_from(np.zeros(4), offsets_only)).data)
    p_size = float(obj.prior_terms(_grid_from(np.zeros(4), sizes_only)).data)
    assert abs(p_off - obj.PRIOR_BOX_OFFSET) < 1e-12
    assert abs(p_size - obj.PRIOR_BOX_SIZE) < 1e-12
    assert p_size > p_off


def test_prior_quadruples_when_raw_doubles():
    raw = np.random.default_rng(10).normal(size=(4, 4))
    base = float(obj.prior_terms(_grid_from(np.zeros(4), raw)).data)
    doubled = float(obj.prior_terms(_grid_from(np.zeros(4), 2.0 * raw)).data)
    assert abs(doubled - 4.0 * base) < 1e-9 * max(1.0, abs(doubled))


def test_prior_requires_logits():
    grid = ProposalGrid(2, constant(np.full(4, 0.25)), constant(np.zeros((4, 4))))
    with pytest.raises(ValueError, match="logits"):
        obj.prior_terms(grid)


# -- step assembly and gradient routing ------------------------------------------


def _setup64(seed=0, n=2, grid_size=2):
    rng = np.random.default_rng(seed)
    det = Detector(rng, grid_size=grid_size)
    seg = SegAutoencoder(rng, patch=32)
    inp = Inpainter(rng)
    for net in (det, seg, inp):
        net.astype(np.float64)
    # nudge the heads off their zero init so both paths carry signal
    hrng = np.random.default_rng(seed + 1)
    for name in ("prob_head", "box_head"):
        head = det._modules[name]
        head.w.data += 0.05 * hrng.standard_normal(head.w.data.shape)
    images = _images(rng, n=n, size=det.image_size, dtype=np.float64)
    grids = det(constant(images))
    bundles = obj.prepare_step(images, grids, inp, epsilon=1e-3,
                               rng=np.random.default_rng(seed + 2))
    return det, seg, inp, images, bundles


def _component_sums(det, seg, images, bundles):
    grids = det(constant(images))
    fg = bg = None
    for i in range(len(grids)):
        img = constant(images[i][None])
        o_term, _ = obj.foreground_objective(img, grids[i], bundles[i], seg)
        g_term = obj.background_objective(grids[i], bundles[i])
        fg = o_term if fg is None else fg + o_term
        bg = g_term if bg is None else bg + g_term
    return fg, bg


def _fd(value_fn, param, idx, h=1e-5):
    orig = param.data[idx]
    param.data[idx] = orig + h
    up = value_fn()
    param.data[idx] = orig - h
    down = value_fn()
    param.data[idx] = orig
    return (up - down) / (2.0 * h)


def test_background_term_blind_to_box_head():
    det, seg, inp, images, bundles = _setup64()
    box_w = det._modules["box_head"].w

    def bg_value():
        with no_grad():
            _, bg = _component_sums(det, seg, images, bundles)
        return float(bg.data)

    rng = np.random.default_rng(11)
    flat = [tuple(idx) for idx in np.ndindex(box_w.data.shape)]
    for k in rng.choice(len(flat), size=8, replace=False):
        assert abs(_fd(bg_value, box_w, flat[k])) <= 1e-6


def test_foreground_term_blind_to_prob_head():
    det, seg, inp, images, bundles = _setup64()
    prob_w = det._modules["prob_head"].w

    def fg_value():
        with no_grad():
            fg, _ = _component_sums(det, seg, images, bundles)
        return float(fg.data)

    rng = np.random.default_rng(12)
    flat = [tuple(idx) for idx in np.ndindex(prob_w.data.shape)]
    for k in rng.choice(len(flat), size=8, replace=False):
        assert abs(_fd(fg_value, prob_w, flat[k])) <= 1e-6


def test_live_paths_match_finite_differences():
    det, seg, inp, images, bundles = _setup64()
    prob_w = det._modules["prob_head"].w
    box_w = det._modules["box_head"].w

    det.zero_grad()
    seg.zero_grad()
    fg, bg = _component_sums(det, seg, images, bundles)
    bg.backward()
    g_prob = prob_w.grad.copy()
    det.zero_grad()
    seg.zero_grad()
    fg, bg = _component_sums(det, seg, images, bundles)
    fg.backward()
    g_box = box_w.grad.copy()

    def bg_value():
        with no_grad():
            return float(_component_sums(det, seg, images, bundles)[1].data)

    def fg_value():
        with no_grad():
            return float(_component_sums(det, seg, images, bundles)[0].data)

    rng = np.random.default_rng(13)
    flat_p = [tuple(idx) for idx in np.ndindex(prob_w.data.shape)]
    for k in rng.choice(len(flat_p), size=4, replace=False):
        idx = flat_p[k]
        num = _fd(bg_value, prob_w, idx)
        ref = max(abs(num), abs(g_prob[idx]), 1e-8)
        assert abs(num - g_prob[idx]) / ref < 1e-3

    flat_b = [tuple(idx) for idx in np.ndindex(box_w.data.shape)]
    checked = 0
    for k in rng.choice(len(flat_b), size=8, replace=False):
        idx = flat_b[k]
        num = _fd(fg_value, box_w, idx)
        if abs(num) < 1e-9 and abs(g_box[idx]) < 1e-9:
            continue
        ref = max(abs(num), abs(g_box[idx]))
        assert abs(num - g_box[idx]) / ref < 1e-3
        checked += 1
    assert checked >= 2


def test_segmenter_receives_gradients_only_from_foreground():
    det, seg, inp, images, bundles = _setup64()
    det.zero_grad()
    seg.zero_grad()
    _, bg = _component_sums(det, seg, images, bundles)
    bg.backward()
    assert all(p.grad is None or np.all(p.grad == 0.0) for p in seg.parameters())
    det.zero_grad()
    seg.zero_grad()
    fg, _ = _component_sums(det, seg, images, bundles)
    fg.backward()
    assert any(p.grad is not None and np.any(p.grad != 0.0) for p in seg.parameters())


def test_total_loss_component_signs_and_stats():
    det, seg, inp, images, bundles = _setup64(seed=20)
    grids = det(constant(images))
    loss, stats = obj.total_step_loss(images, grids, bundles, seg)
    assert stats["loss_fg"] >= 0.0
    assert stats["loss_bg"] <= 0.0
    assert stats["loss_prior"] >= 0.0
    assert abs(stats["loss_total"]
               - (stats["loss_fg"] + stats["loss_bg"] + stats["loss_prior"])) < 1e-9
    assert stats["drawn_cell"] == bundles[0].draw.index
    loss.backward()


def test_unknown_mode_rejected():
    det, seg, inp, images, bundles = _setup64(seed=21)
    grids = det(constant(images))
    with pytest.raises(ValueError, match="mode"):
        obj.total_step_loss(images, grids, bundles, seg, mode="fancy")


def test_bg_only_mode_skips_foreground():
    det, seg, inp, images, bundles = _setup64(seed=22)
    grids = det(constant(images))
    loss, stats = obj.total_step_loss(images, grids, bundles, seg, mode="bg-only")
    assert stats["loss_fg"] == 0.0
    det.zero_grad()
    loss.backward()
    box_w = det._modules["box_head"].w
    # the soft scoring window keeps the box head trainable without O
    assert np.any(box_w.grad != 0.0)


def test_no_routing_mode_links_both_paths():
    det, seg, inp, images, bundles = _setup64(seed=23)
    grids = det(constant(images))
    fg = bg = None
    for i in range(len(grids)):
        img = constant(images[i][None])
        o_term, _ = obj.foreground_objective(img, grids[i], bundles[i], seg,
                                             live_ratio=True)
        g_term = obj.background_objective(grids[i], bundles[i], image=img,
                                          soft_box=True)
        fg = o_term if fg is None else fg + o_term
        bg = g_term if bg is None else bg + g_term
    det.zero_grad()
    fg.backward()
    assert np.any(det._modules["prob_head"].w.grad != 0.0)
    det.zero_grad()
    bg.backward()
    assert np.any(det._modules["box_head"].w.grad != 0.0)


def test_soft_region_covers_box_interior():
    box = parameter(np.array([0.5, 0.5, 0.4, 0.4], dtype=np.float64))
    region = obj.soft_region(box, 64, 64)
    data = region.data[0, 0]
    assert data[32, 32] > 0.95
    assert data[2, 2] < 0.05
    region.mean().backward()
    assert np.any(box.grad != 0.0)


# -- sampling phase -------------------------------------------------------------


def test_bundle_splices_true_pixels_outside_hole():
    det, seg, inp, images, bundles = _setup64(seed=24)
    for img, bundle in zip(images, bundles):
        outside = bundle.erase_mask[0] == 0.0
        assert np.array_equal(bundle.bhat[:, outside], img[:, outside])
        assert bundle.loss_bg >= 0.0


def test_known_background_override():
    det, seg, inp, images, bundles = _setup64(seed=25)
    plates = np.clip(images + 0.05, 0.0, 1.0)
    grids = det(constant(images))
    bundles = obj.prepare_step(images, grids, None, epsilon=1e-3,
                               rng=np.random.default_rng(3), background_override=plates)
    for img, plate, bundle in zip(images, plates, bundles):
        inside = bundle.erase_mask[0] == 1.0
        assert np.array_equal(bundle.bhat[:, inside], plate[:, inside])
        assert np.array_equal(bundle.bhat[:, ~inside], img[:, ~inside])


def test_background_term_more_negative_on_sprite():
    # With the clean plate as background estimate, erasing the sprite leaves
    # a residual the plate cannot explain, so that candidate scores lower
    # (more negative) than an empty patch of background.
    spec = SceneSpec(camera="static", seed=31)
    sample = generate_sequence(spec, 1, sequence_id=0)[0]
    image = hwc_to_chw(sample.image)[None].astype(np.float64)
    plate = hwc_to_chw(sample.clean_background)[None].astype(np.float64)
    gt = sample.gt_box

    corner = BBox(cx=0.15 if gt.cx > 0.5 else 0.85,
                  cy=0.15 if gt.cy > 0.5 else 0.85, w=gt.w, h=gt.h)
    raw = np.zeros((4, 4))
    terms = {}
    for name, box in (("sprite", gt), ("corner", corner)):
        # steer cell 0 so its decoded box lands exactly on the target
        off = np.array([box.cx - 0.25, box.cy - 0.25]) * 2.0 / 1.5
        raw0 = np.arctanh(np.clip(off, -0.999, 0.999))
        size = np.array([box.w, box.h])
        raw2 = np.log((size - 0.05) / (0.9 - size))
        raw[0] = np.concatenate([raw0, raw2])
        probs = np.array([1.0 - 3e-9, 1e-9, 1e-9, 1e-9])
        grid = ProposalGrid(2, constant(probs), constant(raw.copy()))
        bundle = obj.prepare_step(image, [grid], None, epsilon=1e-12,
                                  rng=np.random.default_rng(0),
                                  background_override=plate)[0]
        assert bundle.draw.index == 0
        terms[name] = float(obj.background_objective(grid, bundle).data)
    assert terms["sprite"] < terms["corner"] <= 0.0
