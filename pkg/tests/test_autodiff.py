import numpy as np
import pytest

from selfsupdet.autodiff import Tensor, concat, no_grad, stop_gradient
from selfsupdet.autodiff import functional as F
from selfsupdet.autodiff.gradcheck import check_grad
from selfsupdet.autodiff.optim import SGD, Adam


def test_add_values():
    out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    assert np.allclose(out.data, [4.0, 6.0])


def test_softmax_symmetry():
    out = Tensor([0.0, 0.0, 0.0, 0.0]).softmax()
    assert np.allclose(out.data, [0.25] * 4)


def test_softmax_normalized():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((5, 7)))
    s = x.softmax(axis=-1)
    assert (s.data > 0).all()
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)


def test_conv2d_same_padding_shape():
    x = Tensor(np.zeros((1, 1, 8, 8)))
    w = Tensor(np.zeros((1, 1, 3, 3)))
    out = F.conv2d(x, w, stride=1, padding=1)
    assert out.shape == (1, 1, 8, 8)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(1)
    img = rng.random((2, 1, 6, 6)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), dtype=np.float32)
    k[0, 0, 1, 1] = 1.0
    out = F.conv2d(Tensor(img), Tensor(k), stride=1, padding=1)
    assert np.allclose(out.data, img)


def test_conv2d_shape_mismatch_message():
    with pytest.raises(ValueError, match="conv2d"):
        F.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))))


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = x.square().sum()
    loss.backward()
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_backward_rejects_nan_loss():
    x = Tensor([np.nan], requires_grad=True)
    with pytest.raises(FloatingPointError):
        x.sum().backward()


def test_stop_gradient_value_and_grad():
    x = Tensor([5.0], requires_grad=True)
    assert np.allclose(stop_gradient(x).data, [5.0])
    loss = stop_gradient(x).sum()
    loss.backward()
    assert x.grad is None

    # grad flows through y but not x in sum(stop(x) * y)
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    (stop_gradient(x) * y).sum().backward()
    assert x.grad is None
    assert np.allclose(y.grad, [1.0, 2.0])


def test_stop_gradient_ratio_toy():
    # two-candidate (P / stop(q)) * loss: theta gets the score-path gradient,
    # the stopped q is a constant of the graph and receives none. The
    # finite-difference oracle therefore probes with q frozen at its
    # base-point value.
    theta = np.array([0.2, -0.3])
    ell = np.array([1.0, 2.0])
    q0 = Tensor(theta, dtype=np.float64).softmax()  # base-point value of q

    def loss_fn(t):
        p = t.softmax()
        return ((p / stop_gradient(q0)) * Tensor(ell, dtype=np.float64)).sum()

    ok, worst = check_grad(loss_fn, theta, rtol=1e-6, min_pass_fraction=1.0)
    assert ok, f"ratio gradient mismatch, worst rel err {worst}"

    # q path receives nothing even when q is itself a graph node
    t = Tensor(theta, requires_grad=True, dtype=np.float64)
    p = t.softmax()
    q = stop_gradient(p)
    ((p / q) * Tensor(ell, dtype=np.float64)).sum().backward()
    assert t.grad is not None and np.abs(t.grad).max() > 0


UNARY_CASES = [
    ("neg", lambda t: (-t).sum(), None),
    ("mul", lambda t: (t * t).mean(), None),
    ("div", lambda t: (1.0 / (t * t + 2.0)).sum(), None),
    ("square", lambda t: t.square().sum(), None),
    ("abs", lambda t: t.abs().sum(), None),
    ("sqrt", lambda t: (t.square() + 1.0).sqrt().sum(), None),
    ("exp", lambda t: t.exp().mean(), None),
    ("log", lambda t: (t.square() + 0.5).log().sum(), None),
    ("tanh", lambda t: t.tanh().sum(), None),
    ("sigmoid", lambda t: t.sigmoid().sum(), None),
    ("leaky_relu", lambda t: t.leaky_relu().sum(), None),
    ("relu", lambda t: t.relu().sum(), None),
    ("softmax", lambda t: (t.softmax(axis=-1) * t.softmax(axis=-1)).sum(), None),
    ("mean_axis", lambda t: t.mean(axis=0).square().sum(), None),
    ("sum_keepdims", lambda t: t.sum(axis=1, keepdims=True).square().mean(), None),
    ("reshape", lambda t: t.reshape(-1).square().sum(), None),
    ("transpose", lambda t: t.transpose(1, 0).square().mean(), None),
    ("slice", lambda t: t[1:, :2].square().sum(), None),
    ("clip", lambda t: t.clip(-0.4, 0.4).square().sum(), None),
    ("pow", lambda t: (t.square() + 1.0) ** 1.5, None),
]


@pytest.mark.parametrize("name,fn,_", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
def test_gradcheck_elementwise(name, fn, _):
    rng = np.random.default_rng(hash(name) % 2**32)
    x0 = rng.standard_normal((4, 3)) * 0.7 + 0.05

    def loss_fn(t):
        out = fn(t)
        return out if out.size == 1 else out.sum()

    ok, worst = check_grad(loss_fn, x0, rtol=1e-3, rng=rng)
    assert ok, f"{name}: worst relative error {worst}"


def test_gradcheck_matmul():
    rng = np.random.default_rng(7)
    a0 = rng.standard_normal((3, 4))
    b_const = Tensor(rng.standard_normal((4, 2)), dtype=np.float64)
    ok, worst = check_grad(lambda t: (t @ b_const).square().sum(), a0)
    assert ok, worst


def test_gradcheck_concat():
    rng = np.random.default_rng(8)
    x0 = rng.standard_normal((2, 3))
    other = Tensor(rng.standard_normal((2, 2)), dtype=np.float64)
    ok, worst = check_grad(lambda t: concat([t, other], axis=1).square().sum(), x0)
    assert ok, worst


def test_gradcheck_broadcast_add():
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal(5)
    other = Tensor(rng.standard_normal((3, 5)), dtype=np.float64)
    ok, worst = check_grad(lambda t: (other + t).square().sum(), x0)
    assert ok, worst


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_gradcheck_conv2d(stride, padding):
    rng = np.random.default_rng(10 + stride + padding)
    x0 = rng.standard_normal((2, 2, 6, 6))
    w0 = rng.standard_normal((3, 2, 3, 3)) * 0.5
    b0 = rng.standard_normal(3)

    w_const = Tensor(w0, dtype=np.float64)
    b_const = Tensor(b0, dtype=np.float64)
    ok, worst = check_grad(
        lambda t: F.conv2d(t, w_const, b_const, stride=stride, padding=padding).square().sum(),
        x0, rng=rng)
    assert ok, f"d/dx worst {worst}"

    x_const = Tensor(x0, dtype=np.float64)
    ok, worst = check_grad(
        lambda t: F.conv2d(x_const, t, b_const, stride=stride, padding=padding).square().sum(),
        w0, rng=rng)
    assert ok, f"d/dw worst {worst}"


def test_gradcheck_upsample():
    rng = np.random.default_rng(13)
    x0 = rng.standard_normal((1, 2, 3, 3))
    ok, worst = check_grad(lambda t: F.upsample_nearest2(t).square().sum(), x0)
    assert ok, worst


@pytest.mark.parametrize("padding", ["border", "zeros"])
def test_gradcheck_grid_sample(padding):
    rng = np.random.default_rng(14)
    img0 = rng.random((1, 2, 5, 5))
    # off-grid coordinates, some outside the image
    gx0 = rng.uniform(-0.8, 4.8, size=(1, 3, 3)) + 0.13
    gy0 = rng.uniform(-0.8, 4.8, size=(1, 3, 3)) + 0.21

    gx_c = Tensor(gx0, dtype=np.float64)
    gy_c = Tensor(gy0, dtype=np.float64)
    ok, worst = check_grad(
        lambda t: F.grid_sample(t, gx_c, gy_c, padding=padding).square().sum(), img0)
    assert ok, f"d/dimg worst {worst}"

    img_c = Tensor(img0, dtype=np.float64)
    ok, worst = check_grad(
        lambda t: F.grid_sample(img_c, t, gy_c, padding=padding).square().sum(), gx0)
    assert ok, f"d/dgx worst {worst}"
    ok, worst = check_grad(
        lambda t: F.grid_sample(img_c, gx_c, t, padding=padding).square().sum(), gy0)
    assert ok, f"d/dgy worst {worst}"


def test_no_grad_suppresses_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    assert y._backward is None


def test_forward_determinism():
    rng = np.random.default_rng(21)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = F.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = F.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert np.array_equal(a, b)


def test_sgd_step():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([2.0], dtype=np.float32)
    SGD([p], lr=0.1).step()
    assert np.allclose(p.data, [0.8])


def test_adam_first_step_magnitude():
    # bias-corrected first step moves by ~lr * sign(g)
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.array([0.3, -4.0], dtype=np.float32)
    opt = Adam([p], lr=1e-2)
    opt.step()
    moved = np.array([1.0, -2.0]) - p.data
    assert np.allclose(moved, 1e-2 * np.sign([0.3, -4.0]), atol=1e-5)


def test_zero_grad_leaves_param_unchanged():
    p = Tensor([1.5], requires_grad=True)
    opt = Adam([p], lr=1e-2)
    opt.step()  # grad is None
    assert np.allclose(p.data, [1.5])


def test_nonfinite_grad_skips_step():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([np.inf], dtype=np.float32)
    opt = Adam([p], lr=1e-2)
    assert opt.step() is False
    assert np.allclose(p.data, [1.0])
    assert opt.skipped_steps == 1
