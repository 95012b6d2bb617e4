import numpy as np
import pytest

from config.settings import NetConfig
from network.cascade import (
    CascadeModel, backward_and_step, cascade_backward, cascade_batch_loss, cascade_forward, require_same_arch,
)
from network.layers import (
    conv3d, conv3d_backward, dropout, he_init, leaky_relu, leaky_relu_backward, maxpool3d,
    maxpool3d_backward, upsample_trilinear, upsample_trilinear_backward,
)
from network.optim import OptimizerState
from network.stage import StageArch, StageModel, stage_forward
from utils.errors import ArchitectureMismatch, IndivisibleDims, NoRecordedForward, OddSpatialDims, ShapeMismatch
from utils.hierarchy import MVO


def _numeric(f, x, index, h=1e-6):
    up, down = x.copy(), x.copy()
    up[index] += h
    down[index] -= h
    return (f(up) - f(down)) / (2 * h)


def _close(analytic, numeric, rel):
    return abs(analytic - numeric) <= rel * max(abs(analytic), abs(numeric)) + 1e-9


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def test_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 3, 4, 5))
    out = conv3d(x, np.ones((1, 1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out, x)


def test_all_ones_kernel_counts_taps():
    out = conv3d(np.ones((1, 1, 5, 5, 5)), np.ones((1, 1, 3, 3, 3)), np.zeros(1))
    assert out[0, 0, 2, 2, 2] == 27
    assert out[0, 0, 0, 2, 2] == 18
    assert out[0, 0, 0, 0, 0] == 8


def _loop_conv3d(x, kernel, bias):
    b_n, ci_n, nx, ny, nz = x.shape
    co_n, _, k, _, _ = kernel.shape
    p = (k - 1) // 2
    out = np.zeros((b_n, co_n, nx, ny, nz))
    for b in range(b_n):
        for co in range(co_n):
            for i in range(nx):
                for j in range(ny):
                    for l in range(nz):
                        total = bias[co]
                        for ci in range(ci_n):
                            for a in range(k):
                                for c in range(k):
                                    for d in range(k):
                                        u, v, w = i + a - p, j + c - p, l + d - p
                                        if 0 <= u < nx and 0 <= v < ny and 0 <= w < nz:
                                            total += kernel[co, ci, a, c, d] * x[b, ci, u, v, w]
                        out[b, co, i, j, l] = total
    return out


def test_conv3d_matches_loop_oracle():
    rng = np.random.default_rng(40)
    for _ in range(100):
        dims = tuple(int(n) for n in rng.integers(1, 6, 3))
        ci, co = (int(n) for n in rng.integers(1, 3, 2))
        x = rng.normal(size=(1, ci) + dims)
        kernel = rng.normal(size=(co, ci, 3, 3, 3))
        bias = rng.normal(size=co)
        assert np.allclose(conv3d(x, kernel, bias), _loop_conv3d(x, kernel, bias), rtol=0, atol=1e-10)


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 3, 4, 3))
    kernel = rng.normal(size=(3, 2, 3, 3, 3))
    bias = rng.normal(size=3)
    seed = rng.normal(size=(2, 3, 3, 4, 3))
    dx, dk, db = conv3d_backward(seed, x, kernel)

    def loss_x(v):
        return float((seed * conv3d(v, kernel, bias)).sum())

    def loss_k(v):
        return float((seed * conv3d(x, v, bias)).sum())

    def loss_b(v):
        return float((seed * conv3d(x, kernel, v)).sum())

    for index in [(0, 0, 0, 0, 0), (1, 1, 2, 3, 1), (0, 1, 1, 2, 2)]:
        assert _close(dx[index], _numeric(loss_x, x, index), 1e-4)
    for index in [(0, 0, 1, 1, 1), (2, 1, 0, 2, 0)]:
        assert _close(dk[index], _numeric(loss_k, kernel, index), 1e-4)
    assert _close(db[1], _numeric(loss_b, bias, (1,)), 1e-4)


def test_leaky_relu():
    assert leaky_relu(np.array([2.0]))[0] == 2.0
    assert leaky_relu(np.array([-1.0]))[0] == pytest.approx(-0.1)
    assert leaky_relu_backward(np.array([5.0]), np.array([-3.0]))[0] == pytest.approx(0.5)


def test_dropout_identity_cases():
    x = np.random.default_rng(2).normal(size=(1, 2, 2, 2, 2))
    assert dropout(x, 0.5, training=False)[0] is x
    assert dropout(x, 0.0, training=True, rng=np.random.default_rng(0))[0] is x


def test_dropout_keeps_expectation():
    x = np.ones((1, 1, 40, 40, 40))
    out, mask = dropout(x, 0.1, training=True, rng=np.random.default_rng(3))
    assert np.all((out == 0.0) | np.isclose(out, 1.0 / 0.9))
    assert np.array_equal(out, x * mask)
    assert out.mean() == pytest.approx(1.0, abs=0.02)


def test_maxpool_window_and_gradient():
    x = np.zeros((1, 1, 2, 2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                x[0, 0, i, j, k] = 1 + i + 2 * j + 4 * k
    out, index = maxpool3d(x)
    assert out[0, 0, 0, 0, 0] == 8
    grad = maxpool3d_backward(np.ones((1, 1, 1, 1, 1)), index)
    assert grad[0, 0, 1, 1, 1] == 1
    assert grad.sum() == 1


def test_maxpool_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 4, 2, 4))
    seed = rng.normal(size=(1, 2, 2, 1, 2))
    _, index = maxpool3d(x)
    dx = maxpool3d_backward(seed, index)
    for idx in [(0, 0, 1, 0, 3), (0, 1, 2, 1, 0), (0, 1, 3, 1, 2)]:
        assert _close(dx[idx], _numeric(lambda v: float((seed * maxpool3d(v)[0]).sum()), x, idx), 1e-5)


def test_maxpool_matches_window_scan():
    rng = np.random.default_rng(41)
    for trial in range(100):
        dims = (8, 8, 8) if trial == 0 else tuple(2 * int(n) for n in rng.integers(1, 7, 3))
        x = rng.normal(size=(2, 2) + dims)
        out, index = maxpool3d(x)
        routed = maxpool3d_backward(np.ones(out.shape), index)
        expected_out = np.zeros(out.shape)
        expected_routed = np.zeros(x.shape)
        for b in range(2):
            for ch in range(2):
                for i in range(dims[0] // 2):
                    for j in range(dims[1] // 2):
                        for l in range(dims[2] // 2):
                            window = x[b, ch, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * l:2 * l + 2]
                            a, c, d = np.unravel_index(np.argmax(window), window.shape)
                            expected_out[b, ch, i, j, l] = window[a, c, d]
                            expected_routed[b, ch, 2 * i + a, 2 * j + c, 2 * l + d] = 1.0
        assert np.array_equal(out, expected_out)
        assert np.array_equal(routed, expected_routed)


def test_maxpool_rejects_odd_dims():
    with pytest.raises(OddSpatialDims):
        maxpool3d(np.zeros((1, 1, 3, 2, 2)))


def test_upsample_constant_and_gradient():
    const = np.full((1, 1, 2, 3, 2), 4.0)
    assert np.allclose(upsample_trilinear(const), 4.0)
    assert upsample_trilinear(const).shape == (1, 1, 4, 6, 4)

    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 3, 2, 2))
    seed = rng.normal(size=(1, 2, 6, 4, 4))
    dx = upsample_trilinear_backward(seed)
    for idx in [(0, 0, 0, 0, 0), (0, 1, 2, 1, 1), (0, 0, 1, 1, 0)]:
        assert _close(dx[idx], _numeric(lambda v: float((seed * upsample_trilinear(v)).sum()), x, idx), 1e-5)


def test_he_init_statistics_and_determinism():
    w = he_init((200, 2, 5, 5, 5), 2, np.random.default_rng(6), np.float64)
    assert w.std() == pytest.approx(1.0, abs=0.02)
    again = he_init((200, 2, 5, 5, 5), 2, np.random.default_rng(6), np.float64)
    assert np.array_equal(w, again)


# ---------------------------------------------------------------------------
# Stage
# ---------------------------------------------------------------------------

def test_desk_stage_output_shape():
    stage = StageModel.build(StageArch(1, 3, levels=3, base_filters=8), np.random.default_rng(0))
    out = stage.forward(np.zeros((1, 1, 32, 32, 32), dtype=np.float32))
    assert out.shape == (1, 3, 32, 32, 32)


def test_stage_is_deterministic_without_dropout():
    arch = StageArch(1, 3, levels=2, base_filters=3)
    x = np.random.default_rng(1).normal(size=(1, 1, 8, 8, 4))
    a = StageModel.build(arch, np.random.default_rng(7)).forward(x)
    b = stage_forward(StageModel.build(arch, np.random.default_rng(7)), x, training=False)
    assert a.tobytes() == b.tobytes()


def test_stage_shape_errors():
    stage = StageModel.build(StageArch(1, 3, levels=3, base_filters=2), np.random.default_rng(0))
    with pytest.raises(IndivisibleDims):
        stage.forward(np.zeros((1, 1, 8, 8, 6)))
    with pytest.raises(ShapeMismatch):
        stage.forward(np.zeros((1, 2, 8, 8, 8)))
    with pytest.raises(NoRecordedForward):
        stage.backward(np.zeros((1, 3, 8, 8, 8)))


def test_stage_backward_matches_finite_differences():
    arch = StageArch(2, 3, levels=2, base_filters=2, pre_convs=1, post_convs=1, dropout_rate=0.0)
    stage = StageModel.build(arch, np.random.default_rng(8), np.float64)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 2, 4, 4, 4))
    seed = rng.normal(size=(1, 3, 4, 4, 4))

    stage.forward(x)
    dx, grads = stage.backward(seed)

    def loss_x(v):
        return float((seed * stage.forward(v)).sum())

    for idx in [(0, 0, 0, 0, 0), (0, 1, 2, 3, 1), (0, 0, 3, 1, 2)]:
        assert _close(dx[idx], _numeric(loss_x, x, idx), 1e-4)

    for name in ["pre.0.weight", "enc.1.conv0.weight", "dec.0.conv1.bias", "head.weight"]:
        param = stage.params[name]
        idx = tuple(0 for _ in param.shape)

        def loss_p(v, name=name):
            saved = stage.params[name]
            stage.params[name] = v
            try:
                return float((seed * stage.forward(x)).sum())
            finally:
                stage.params[name] = saved

        assert _close(grads[name][idx], _numeric(loss_p, param, idx), 1e-4)


# ---------------------------------------------------------------------------
# Cascade
# ---------------------------------------------------------------------------

def test_stage_channel_counts(tiny_cascade):
    assert tiny_cascade.stage2.arch.in_channels == 4
    assert tiny_cascade.stage3.arch.in_channels == 5
    assert [s.arch.out_channels for s in tiny_cascade.stages] == [3, 4, 5]


def test_cascade_is_feed_forward(tiny_cascade):
    x = np.random.default_rng(0).normal(size=(1, 1, 4, 4, 4))
    zeroed = {k: (np.zeros_like(v) if k.startswith("stage3/") else v) for k, v in tiny_cascade.parameters().items()}
    other = tiny_cascade.with_parameters(zeroed)
    a, b = cascade_forward(tiny_cascade, x), cascade_forward(other, x)
    assert np.array_equal(a.p1, b.p1)
    assert np.array_equal(a.p2, b.p2)
    assert not np.array_equal(a.p3, b.p3)


def test_cascade_rejects_multichannel_input(tiny_cascade):
    with pytest.raises(ShapeMismatch):
        cascade_forward(tiny_cascade, np.zeros((1, 2, 4, 4, 4)))


def _labels_with_mvo(rng, dims):
    codes = rng.integers(0, 4, dims)
    codes[1:3, 1:3, 1:3] = MVO
    return codes


def test_end_to_end_gradient_matches_finite_differences(tiny_cascade):
    rng = np.random.default_rng(10)
    x = rng.normal(size=(1, 1, 8, 8, 8))
    y = _labels_with_mvo(rng, (1, 8, 8, 8))

    out = cascade_forward(tiny_cascade, x)
    grads = cascade_backward(tiny_cascade, out, cascade_batch_loss(out, y))
    params = tiny_cascade.parameters()

    names = sorted(k for k in params if k.startswith("stage1/"))
    picks = rng.choice(len(names), size=5, replace=False)
    for pick in picks:
        name = names[pick]
        flat_index = int(rng.integers(params[name].size))
        idx = np.unravel_index(flat_index, params[name].shape)

        def total(v, name=name):
            saved = params[name].copy()
            params[name][...] = v
            try:
                return cascade_batch_loss(cascade_forward(tiny_cascade, x), y).total
            finally:
                params[name][...] = saved

        numeric = _numeric(total, params[name].copy(), idx)
        assert _close(grads[name][idx], numeric, 1e-3), name


def test_stage3_gradient_comes_only_from_mvo_samples(tiny_cascade):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 1, 4, 4, 4))
    y = np.stack([_labels_with_mvo(rng, (4, 4, 4)), rng.integers(0, 4, (4, 4, 4))])

    out = cascade_forward(tiny_cascade, x, stage3_mask=[True, False])
    pair = cascade_backward(tiny_cascade, out, cascade_batch_loss(out, y))
    out = cascade_forward(tiny_cascade, x[:1], stage3_mask=[True])
    single = cascade_backward(tiny_cascade, out, cascade_batch_loss(out, y[:1]))

    for name in (k for k in pair if k.startswith("stage3/")):
        assert np.allclose(pair[name], 0.5 * single[name], rtol=1e-9, atol=1e-14)


def test_non_mvo_batch_leaves_stage3_untouched(tiny_cascade):
    rng = np.random.default_rng(12)
    x = rng.normal(size=(1, 1, 4, 4, 4))
    y = rng.integers(0, 4, (1, 4, 4, 4))
    before = {k: v.copy() for k, v in tiny_cascade.parameters().items()}
    opt = OptimizerState.create(tiny_cascade.parameters())

    out = cascade_forward(tiny_cascade, x, stage3_mask=[False])
    grads = backward_and_step(tiny_cascade, opt, out, cascade_batch_loss(out, y))

    assert not any(k.startswith("stage3/") for k in grads)
    after = tiny_cascade.parameters()
    assert all(np.array_equal(after[k], before[k]) for k in before if k.startswith("stage3/"))
    assert any(not np.array_equal(after[k], before[k]) for k in before if k.startswith("stage1/"))


def test_architecture_mismatch(tiny_net):
    a = CascadeModel.build(tiny_net, np.random.default_rng(0))
    b = CascadeModel.build(NetConfig(levels=2, base_filters=3, pre_convs=1, post_convs=1), np.random.default_rng(0))
    with pytest.raises(ArchitectureMismatch):
        require_same_arch([a, b])
