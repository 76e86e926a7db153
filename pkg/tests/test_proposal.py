"""Detector output contracts, box decoding, and argmax selection."""

import numpy as np
import pytest

from selfsupdet.autodiff import Tensor
from selfsupdet.proposal import (Detector, ProposalGrid, decode_box, decode_box_tensor,
                                 decode_boxes, select_argmax)


def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def test_decode_box_zero_params_cell_2_3():
    # row 2, column 3 on an 8-grid: anchor (0.4375, 0.3125), midpoint size
    box = decode_box(2 * 8 + 3, np.zeros(4), grid_size=8)
    assert np.allclose([box.cx, box.cy, box.w, box.h], [0.4375, 0.3125, 0.475, 0.475])


def test_decode_box_offset_saturates_at_limit():
    g = 8
    box = decode_box(0, np.array([50.0, -50.0, 0.0, 0.0]), grid_size=g)
    anchor = 0.5 / g
    assert box.cx == pytest.approx(anchor + 1.5 / g, abs=1e-6)
    assert box.cy == pytest.approx(0.0)  # anchor - 1.5/g < 0, clamped into the image


def test_decode_box_size_range():
    lo = decode_box(0, np.array([0, 0, -50.0, -50.0]), grid_size=8)
    hi = decode_box(0, np.array([0, 0, 50.0, 50.0]), grid_size=8)
    assert lo.w == pytest.approx(0.05, abs=1e-6)
    assert hi.h == pytest.approx(0.9, abs=1e-6)


def test_decode_box_monotone_in_offset():
    g = 8
    cxs = [decode_box(27, np.array([dx, 0, 0, 0]), g).cx for dx in np.linspace(-2.0, 2.0, 21)]
    assert all(b >= a for a, b in zip(cxs, cxs[1:]))


def test_decoded_boxes_always_intersect_image():
    rng = np.random.default_rng(0)
    g = 8
    per_grid = rng.standard_normal((1570, g * g, 4)) * 10.0  # just over 1e5 draws
    for chunk in per_grid:
        boxes = decode_boxes(chunk, g)
        x0 = boxes[:, 0] - boxes[:, 2] / 2
        x1 = boxes[:, 0] + boxes[:, 2] / 2
        y0 = boxes[:, 1] - boxes[:, 3] / 2
        y1 = boxes[:, 1] + boxes[:, 3] / 2
        assert np.all((x1 > 0) & (x0 < 1) & (y1 > 0) & (y0 < 1))
        assert np.all((boxes[:, 2] > 0) & (boxes[:, 3] > 0))


def test_decode_boxes_matches_scalar_decode():
    rng = np.random.default_rng(1)
    raw = rng.standard_normal((16, 4))
    table = decode_boxes(raw, grid_size=4)
    for i in range(16):
        b = decode_box(i, raw[i], grid_size=4)
        assert np.allclose(table[i], [b.cx, b.cy, b.w, b.h], atol=1e-12)


def test_decode_box_tensor_matches_numpy_and_routes_gradient():
    rng = np.random.default_rng(2)
    raw = rng.standard_normal((16, 4)).astype(np.float64)
    t = Tensor(raw.copy(), requires_grad=True, dtype=np.float64)
    idx = 6
    out = decode_box_tensor(idx, t, grid_size=4)
    ref = decode_box(idx, raw[idx], grid_size=4)
    assert np.allclose(out.data, [ref.cx, ref.cy, ref.w, ref.h], atol=1e-12)
    out.sum().backward()
    assert np.any(t.grad[idx] != 0)
    others = np.delete(t.grad, idx, axis=0)
    assert np.all(others == 0)


def test_select_argmax_one_hot():
    g = 4
    probs = np.zeros(16)
    probs[5] = 1.0
    rng = np.random.default_rng(3)
    raw = rng.standard_normal((16, 4))
    grid = ProposalGrid(g, Tensor(probs), Tensor(raw))
    box, p = select_argmax(grid)
    ref = decode_box(5, raw[5], g)
    assert (box.cx, box.cy, box.w, box.h) == (ref.cx, ref.cy, ref.w, ref.h)
    assert p == pytest.approx(1.0)


def test_select_argmax_uniform_ties_to_cell_zero():
    g = 4
    grid = ProposalGrid(g, Tensor(np.full(16, 1 / 16)), Tensor(np.zeros((16, 4))))
    box, p = select_argmax(grid)
    ref = decode_box(0, np.zeros(4), g)
    assert box.cx == pytest.approx(ref.cx)
    assert box.cy == pytest.approx(ref.cy)
    assert p == pytest.approx(1 / 16)


def test_select_argmax_ignores_non_argmax_perturbation():
    g = 4
    probs = _softmax(np.arange(16, dtype=np.float64) / 8.0)
    raw = np.random.default_rng(4).standard_normal((16, 4))
    box1, _ = select_argmax(ProposalGrid(g, Tensor(probs.copy()), Tensor(raw)))
    probs2 = probs.copy()
    probs2[[2, 7]] = probs2[[7, 2]]  # shuffle low-probability mass
    box2, _ = select_argmax(ProposalGrid(g, Tensor(probs2), Tensor(raw)))
    assert box1 == box2


def test_select_argmax_invariant_under_monotone_logit_transform():
    g = 4
    rng = np.random.default_rng(5)
    logits = rng.standard_normal(16)
    raw = rng.standard_normal((16, 4))
    b1, _ = select_argmax(ProposalGrid(g, Tensor(_softmax(logits)), Tensor(raw)))
    b2, _ = select_argmax(ProposalGrid(g, Tensor(_softmax(3.0 * logits + 2.0)), Tensor(raw)))
    assert b1 == b2


def test_detector_zero_heads_give_uniform_probs_and_anchor_boxes():
    rng = np.random.default_rng(6)
    det = Detector(rng, grid_size=8)
    img = Tensor(rng.uniform(0, 1, (2, 3, 128, 128)).astype(np.float32))
    grids = det(img)
    assert len(grids) == 2
    for grid in grids:
        grid.validate()
        assert grid.probs.data.shape == (64,)
        assert grid.raw_params.data.shape == (64, 4)
        assert np.allclose(grid.probs.data, 1 / 64, atol=1e-7)
        assert np.allclose(grid.raw_params.data, 0.0, atol=1e-7)
    box, p = select_argmax(grids[0])
    assert p == pytest.approx(1 / 64)
    assert (box.w, box.h) == (pytest.approx(0.475), pytest.approx(0.475))


def test_detector_probs_normalized_after_random_input():
    rng = np.random.default_rng(7)
    det = Detector(rng, grid_size=4)
    # break head symmetry so logits are not uniform
    for name, p in det.named_parameters():
        if name.startswith(("prob_head", "box_head")):
            p.data = rng.standard_normal(p.data.shape).astype(np.float32) * 0.1
    img = Tensor(rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32))
    grid = det(img)[0]
    grid.validate()
    assert abs(float(grid.probs.data.sum()) - 1.0) <= 1e-5
    assert not np.allclose(grid.probs.data, 1 / 16)


def test_detector_rejects_wrong_geometry():
    rng = np.random.default_rng(8)
    det = Detector(rng, grid_size=8)
    with pytest.raises(ValueError, match="128px"):
        det(Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))
    with pytest.raises(ValueError, match="images"):
        det(Tensor(np.zeros((1, 1, 128, 128), dtype=np.float32)))


def test_detector_gradients_reach_both_heads_and_backbone():
    rng = np.random.default_rng(9)
    det = Detector(rng, grid_size=4)
    # zero heads block gradient flow into the backbone until their first
    # update; randomize them so this test sees the steady-state topology
    for name, p in det.named_parameters():
        if name.startswith(("prob_head", "box_head")) and name.endswith(".w"):
            p.data = rng.standard_normal(p.data.shape).astype(np.float32) * 0.1
    img = Tensor(rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32))
    grid = det(img)[0]
    loss = (grid.probs * grid.probs).sum() + grid.raw_params.square().sum() \
        + grid.probs[3] + decode_box_tensor(5, grid.raw_params, 4).sum()
    loss.backward()
    named = dict(det.named_parameters())
    assert named["prob_head.w"].grad is not None and np.any(named["prob_head.w"].grad != 0)
    assert named["box_head.w"].grad is not None and np.any(named["box_head.w"].grad != 0)
    assert named["block0.w"].grad is not None and np.any(named["block0.w"].grad != 0)
