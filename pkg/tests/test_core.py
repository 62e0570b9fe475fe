import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mefusion.core import (
    Adam,
    BatchNorm,
    DimensionError,
    Linear,
    Tensor,
    UsageError,
    adam_step,
    checkpoint,
    concat,
    cosine_anneal,
    default_dtype,
)
from mefusion.core import functional as F
from mefusion.core.gradcheck import check_gradients


def loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def loop_conv(x, w, stride, pad):
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for n in range(b):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                out[n, o, i, j] += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
    return out


def bilinear_at(img, x, y):
    """Direct bilinear interpolation of a 2-d array with border clamping."""
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x1] * fx * (1 - fy)
            + img[y1, x0] * (1 - fx) * fy + img[y1, x1] * fx * fy)


# ------------------------------------------------------------------ matmul
def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)


def test_matmul_orthogonal():
    out = Tensor([[1.0, 0.0]]) @ Tensor([[0.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[0.0]])


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    with default_dtype(np.float64):
        out = (Tensor(a) @ Tensor(b)).data
    np.testing.assert_allclose(out, loop_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# -------------------------------------------------------------------- conv
def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((2, 1, 5, 5)).astype(np.float32)
    out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_averaging_kernel_on_constant_image():
    x = np.full((1, 1, 7, 7), 0.3)
    with default_dtype(np.float64):
        out = F.conv2d(Tensor(x), Tensor(np.full((1, 1, 3, 3), 1 / 9)), padding=1).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 0.3, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 1, 5, 5))
    w = rng.standard_normal((1, 1, 3, 3))
    with default_dtype(np.float64):
        out = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(out, loop_conv(x, w, stride, pad), atol=1e-12)
    assert out.shape[-1] == (5 + 2 * pad - 3) // stride + 1


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# -------------------------------------------------------------- batch norm
def _bn(x, training=True):
    n = x.shape[1]
    return F.batch_norm(Tensor(x), Tensor(np.ones(n)), Tensor(np.zeros(n)),
                        np.zeros(n), np.ones(n), training)


def test_batch_norm_constant_feature_gives_zero():
    with default_dtype(np.float64):
        out = _bn(np.full((4, 3), 2.5)).data
    assert np.all(out == 0)


def test_batch_norm_standardized_input_passes_through():
    x = np.array([[-1.0], [1.0], [-1.0], [1.0]])  # mean 0, biased var 1
    with default_dtype(np.float64):
        out = _bn(x).data
    np.testing.assert_allclose(out, x, atol=1e-5)


def test_batch_norm_hand_computed():
    x = np.array([[1.0], [2.0], [3.0], [4.0]])
    # mean 2.5, biased variance 1.25
    expected = (x - 2.5) / np.sqrt(1.25 + 1e-5)
    with default_dtype(np.float64):
        np.testing.assert_allclose(_bn(x).data, expected, rtol=1e-12)


def test_batch_norm_running_stats_momentum():
    bn = BatchNorm(1)
    bn(Tensor(np.array([[1.0], [2.0], [3.0], [4.0]], np.float32)))
    np.testing.assert_allclose(bn._buffers["running_mean"], [0.25])
    np.testing.assert_allclose(bn._buffers["running_var"], [0.9 + 0.1 * 5 / 3])
    bn.eval()
    out = bn(Tensor(np.array([[0.25]], np.float32)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


# ----------------------------------------------------------------- softmax
def test_softmax_uniform():
    np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)


def test_softmax_no_overflow():
    out = F.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-7)


def test_softmax_direct_oracle():
    e = np.exp([1.0, 2.0, 3.0])
    with default_dtype(np.float64):
        np.testing.assert_allclose(F.softmax(Tensor([1.0, 2.0, 3.0])).data, e / e.sum(), rtol=1e-14)


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6),
                  elements=st.floats(-1e4, 1e4)))
def test_softmax_sums_to_one(x):
    out = F.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


# ------------------------------------------------------------- grid sample
def test_grid_sample_identity_is_bit_equal():
    img = np.random.default_rng(3).random((2, 3, 6, 7)).astype(np.float32)
    grid = np.broadcast_to(F.identity_grid(6, 7, np.float32), (2, 6, 7, 2))
    np.testing.assert_array_equal(F.grid_sample(Tensor(img), Tensor(np.array(grid))).data, img)


def test_grid_sample_integer_shift_matches_index_shift():
    img = np.random.default_rng(4).random((1, 2, 5, 6))
    grid = F.identity_grid(5, 6)
    grid[..., 0] += 1
    with default_dtype(np.float64):
        out = F.grid_sample(Tensor(img), Tensor(grid[None])).data
    shifted = np.concatenate([img[..., 1:], img[..., -1:]], axis=-1)  # clamped border
    np.testing.assert_array_equal(out, shifted)


def test_grid_sample_half_pixel_on_ramp():
    ramp = np.tile(np.arange(8.0), (5, 1))[None, None]
    grid = F.identity_grid(5, 8)
    grid[..., 0] += 0.5
    with default_dtype(np.float64):
        out = F.grid_sample(Tensor(ramp), Tensor(grid[None])).data
    np.testing.assert_allclose(out[0, 0, :, :-1], np.tile(np.arange(7.0) + 0.5, (5, 1)), atol=1e-6)


def test_grid_sample_matches_direct_bilinear():
    rng = np.random.default_rng(5)
    img = rng.random((4, 5))
    coords = rng.uniform(-1, 6, size=(3, 3, 2))
    with default_dtype(np.float64):
        out = F.grid_sample(Tensor(img[None, None]), Tensor(coords[None])).data[0, 0]
    expected = np.array([[bilinear_at(img, *coords[i, j]) for j in range(3)] for i in range(3)])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_resize_bilinear_halves_checkerboard():
    board = (np.indices((8, 8)).sum(axis=0) % 2).astype(np.float64)
    with default_dtype(np.float64):
        out = F.resize_bilinear(Tensor(board[None, None]), 4, 4).data[0, 0]
    expected = np.array([[bilinear_at(board, 2 * j + 0.5, 2 * i + 0.5) for j in range(4)] for i in range(4)])
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(out, 0.5)


# ---------------------------------------------------------------- backward
def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).random((3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2).backward()


def test_backward_shared_node_runs_once():
    calls = []
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    original = y._backward

    def spy(g):
        calls.append(1)
        return original(g)

    y._backward = spy
    (y + y * 2).sum().backward()
    assert len(calls) == 1
    np.testing.assert_allclose(x.grad, [18.0])


def test_chain_of_linear_ops_matches_jacobian_product():
    rng = np.random.default_rng(6)
    mats = [rng.standard_normal((3, 3)) for _ in range(4)]
    with default_dtype(np.float64):
        x = Tensor(rng.standard_normal((1, 3)), requires_grad=True)
        y = x
        for m in mats:
            y = y @ Tensor(m)
        y[0, 1].backward()
    jac = mats[0] @ mats[1] @ mats[2] @ mats[3]
    np.testing.assert_allclose(x.grad[0], jac[:, 1], rtol=1e-12)


def test_forward_is_deterministic_under_seed():
    def run():
        rng = np.random.default_rng(42)
        lin = Linear(5, 3, rng)
        return lin(Tensor(rng.standard_normal((2, 5)).astype(np.float32))).data

    np.testing.assert_array_equal(run(), run())


# ----------------------------------------------------------- gradient checks
def _bn_train(x, g, b):
    n = x.shape[1]
    return F.batch_norm(x, g, b, np.zeros(n), np.ones(n), training=True)


GRAD_CASES = {
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)]),
    "mul_div": (lambda a, b: a * b / (b * b + 1.0), [(2, 3), (2, 3)]),
    "tanh": (lambda a: a.tanh(), [(4, 3)]),
    "exp_log": (lambda a: (a.exp() + 1.0).log(), [(4, 3)]),
    "gelu": (lambda a: F.gelu(a), [(4, 3)]),
    "relu": (lambda a: a.relu(), [(4, 3)]),
    "abs": (lambda a: a.abs(), [(4, 3)]),
    "mean_sum": (lambda a: a.mean(axis=1) + a.sum(axis=0).sum(), [(3, 4)]),
    "max": (lambda a: a.max(axis=1), [(3, 4)]),
    "softmax": (lambda a: F.softmax(a, axis=-1), [(3, 5)]),
    "log_softmax": (lambda a: F.log_softmax(a, axis=-1), [(3, 5)]),
    "cross_entropy": (lambda a: F.cross_entropy(a, [0, 2, 1]), [(3, 3)]),
    "layer_norm": (lambda x, g, b: F.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    "batch_norm": (_bn_train, [(5, 3), (3,), (3,)]),
    "batch_norm_4d": (_bn_train, [(2, 2, 3, 3), (2,), (2,)]),
    "conv2d": (lambda x, w, b: F.conv2d(x, w, b, stride=1, padding=1), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_stride2": (lambda x, w: F.conv2d(x, w, stride=2, padding=1), [(1, 2, 6, 6), (2, 2, 3, 3)]),
    "upsample": (lambda x: F.upsample_nearest(x, 2), [(1, 2, 3, 3)]),
    "avg_pool": (lambda x: F.avg_pool2d(x, 2), [(1, 2, 4, 4)]),
    "concat_reshape_transpose": (
        lambda a, b: concat([a, b], axis=1).reshape(3, 2, 3).transpose(1, 0, 2), [(3, 2), (3, 4)]),
    "diff": (lambda a: F.diff(a, axis=1) * F.diff(a, axis=1), [(3, 4)]),
    "getitem": (lambda a: a[np.array([0, 2, 2]), 1:3], [(3, 4)]),
}


def _grid_sample_case(img, coords):
    return F.grid_sample(img, coords)


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-5)])
def test_finite_difference_gradients(name, dtype, tol):
    fn, shapes = GRAD_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs = [rng.standard_normal(s) for s in shapes]
    assert check_gradients(fn, inputs, dtype=dtype, rng=rng) <= tol


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-5)])
def test_grid_sample_gradients(dtype, tol):
    rng = np.random.default_rng(11)
    img = rng.standard_normal((2, 2, 5, 6))
    coords = np.stack([rng.uniform(0.2, 4.8, (2, 3, 4)), rng.uniform(0.2, 3.8, (2, 3, 4))], axis=-1)
    assert check_gradients(_grid_sample_case, [img, coords], dtype=dtype, rng=rng) <= tol


# ------------------------------------------------------------------ optim
def test_adam_single_step_descends():
    x = Tensor([1.0], requires_grad=True)
    (x * x).sum().backward()
    adam_step([x], [x.grad], 0.1, {})
    assert x.data[0] < 1.0


def test_cosine_endpoints():
    assert cosine_anneal(0, 100, 0.002) == pytest.approx(0.002)
    assert cosine_anneal(100, 100, 0.002) == pytest.approx(0.0, abs=1e-15)
    assert cosine_anneal(50, 100, 0.002) == pytest.approx(0.001)


def test_adam_converges_on_quadratic():
    target = np.array([1.5, -0.5])
    scales = np.array([1.0, 4.0])
    with default_dtype(np.float64):
        x = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam([x], lr=0.1)
        for step in range(200):
            opt.zero_grad()
            d = x - Tensor(target)
            (d * d * Tensor(scales)).sum().backward()
            opt.step(lr=cosine_anneal(step, 200, 0.1))
    np.testing.assert_allclose(x.data, target, atol=1e-3)


# ------------------------------------------------------------- checkpoint
def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
              "b.running_var": np.array([1.0, 2.0])}
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, arrays, {"model": {"c": 1}})
    meta, loaded = checkpoint.load(path)
    assert meta == {"model": {"c": 1}}
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        np.testing.assert_array_equal(loaded[k], arrays[k])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(path)


def test_full_reduction_keeps_float64():
    t = Tensor(np.ones((2, 3)))
    assert t.mean().dtype == np.float64
    assert t.sum().dtype == np.float64
    assert Tensor(np.ones(3, np.float32)).sum().dtype == np.float32
