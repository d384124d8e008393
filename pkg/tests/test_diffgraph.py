import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokenseg import diffgraph as dg


def _param(rng, *shape, name=None):
    return dg.Parameter(rng.normal(size=shape), name)


def test_conv_identity_kernel(rng):
    x = dg.Tensor(rng.normal(size=(1, 4, 5, 6)))
    w = dg.Tensor(np.ones((1, 1, 1, 1, 1)))
    y = dg.conv3d(x, w, dg.Tensor(np.zeros(1)))
    assert np.array_equal(y.data, x.data)


def test_conv_counts_neighbours():
    x = dg.Tensor(np.ones((1, 5, 5, 5)))
    y = dg.conv3d(x, dg.Tensor(np.ones((1, 1, 3, 3, 3))))
    assert y.data[0, 2, 2, 2] == 27
    assert y.data[0, 0, 0, 0] == 8   # corner sees zero padding


def test_conv_matches_direct_loops(rng):
    x = rng.normal(size=(2, 5, 4, 3))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    for stride in (1, 2):
        y = dg.conv3d(dg.Tensor(x), dg.Tensor(w), dg.Tensor(b), stride=stride).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
        for o in range(3):
            for d in range(y.shape[1]):
                for h in range(y.shape[2]):
                    for v in range(y.shape[3]):
                        patch = xp[:, stride * d:stride * d + 3, stride * h:stride * h + 3,
                                   stride * v:stride * v + 3]
                        assert y[o, d, h, v] == pytest.approx((patch * w[o]).sum() + b[o], abs=1e-12)


@pytest.mark.parametrize("n", range(1, 10))
def test_stride2_dims(n):
    y = dg.conv3d(dg.Tensor(np.zeros((1, n, n, n))), dg.Tensor(np.zeros((1, 1, 3, 3, 3))), stride=2)
    assert y.shape[1:] == (-(-n // 2),) * 3


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        dg.conv3d(dg.Tensor(np.zeros((2, 4, 4, 4))), dg.Tensor(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(ValueError):
        dg.conv3d(dg.Tensor(np.zeros((1, 4, 4, 4))), dg.Tensor(np.zeros((1, 1, 3, 3, 3))), stride=3)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradcheck(rng, stride):
    x = _param(rng, 1, 4, 4, 4, name="x")
    w = _param(rng, 2, 1, 3, 3, 3, name="w")
    b = _param(rng, 2, name="b")
    rep = dg.grad_check(lambda x, w, b: dg.total(dg.sigmoid(dg.conv3d(x, w, b, stride))), [x, w, b])
    assert rep.passed, rep.per_input


def test_avg_pool_identity_and_constant(rng):
    x = dg.Tensor(rng.normal(size=(2, 4, 4, 4)))
    assert np.array_equal(dg.avg_pool3d(x, (1, 1, 1)).data, x.data)
    c = dg.avg_pool3d(dg.Tensor(np.full((1, 6, 6, 6), 2.5)), (2, 3, 2))
    assert np.allclose(c.data, 2.5)


def test_avg_pool_hand_means(rng):
    x = rng.normal(size=(1, 4, 4, 4))
    y = dg.avg_pool3d(dg.Tensor(x), (2, 2, 2)).data
    for d in range(2):
        for h in range(2):
            for w in range(2):
                cell = x[0, 2 * d:2 * d + 2, 2 * h:2 * h + 2, 2 * w:2 * w + 2]
                assert y[0, d, h, w] == pytest.approx(cell.sum() / 8, abs=1e-14)


def test_avg_pool_replication_padding(rng):
    x = rng.normal(size=(1, 3, 2, 2))
    y = dg.avg_pool3d(dg.Tensor(x), (2, 2, 2)).data
    padded = np.concatenate([x, x[:, -1:]], axis=1)
    assert y[0, 1, 0, 0] == pytest.approx(padded[0, 2:4].mean())
    with pytest.raises(ValueError):
        dg.avg_pool3d(dg.Tensor(x), (0, 1, 1))


def test_avg_pool_gradcheck(rng):
    x = _param(rng, 2, 5, 4, 3)
    rep = dg.grad_check(lambda x: dg.total(dg.sigmoid(dg.avg_pool3d(x, (2, 2, 2)))), [x])
    assert rep.passed


def test_cell_pool_partition_gradcheck(rng):
    x = _param(rng, 2, 8, 5, 4)
    starts = (dg.partition(8, 3), dg.partition(5, 2), dg.partition(4, 4))
    rep = dg.grad_check(lambda x: dg.total(dg.sigmoid(dg.cell_pool(x, starts))), [x])
    assert rep.passed


def test_partition_edges():
    assert list(dg.partition(8, 6)) == [0, 1, 2, 3, 4, 6]
    assert list(dg.partition(16, 4)) == [0, 4, 8, 12]
    with pytest.raises(ValueError):
        dg.partition(2, 3)


def test_upsample_constant():
    y = dg.upsample2_trilinear(dg.Tensor(np.full((2, 3, 4, 5), 1.75)))
    assert y.shape == (2, 6, 8, 10)
    assert np.all(y.data == 1.75)


def test_upsample_ramp_half_slope():
    # closed form, align-corners-false: out[j] = clamp((j + 0.5) / 2 - 0.5, 0, n - 1)
    n = 6
    x = np.broadcast_to(np.arange(n, dtype=float), (1, 2, 2, n)).copy()
    y = dg.upsample2_trilinear(dg.Tensor(x)).data[0, 0, 0]
    expected = np.clip((np.arange(2 * n) + 0.5) / 2 - 0.5, 0, n - 1)
    assert np.allclose(y, expected, atol=1e-15)
    assert np.allclose(np.diff(y)[1:-1], 0.5)


def test_upsample_gradcheck(rng):
    x = _param(rng, 2, 3, 2, 4)
    rep = dg.grad_check(lambda x: dg.total(dg.sigmoid(dg.upsample2_trilinear(x))), [x])
    assert rep.passed


def test_sigmoid_relu_concat():
    assert dg.sigmoid(dg.Tensor(np.zeros(1))).data[0] == 0.5
    assert np.array_equal(dg.relu(dg.Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
    a = dg.Tensor(np.zeros((2, 3, 3, 3)))
    b = dg.Tensor(np.ones((3, 3, 3, 3)))
    c = dg.concat_channels(a, b)
    assert c.shape[0] == 5 and not c.data[:2].any() and c.data[2:].all()
    with pytest.raises(ValueError):
        dg.concat_channels(a, dg.Tensor(np.ones((1, 2, 3, 3))))


def test_pointwise_gradcheck(rng):
    x = _param(rng, 3, 2, 3, 2)
    w = _param(rng, 4, 3)
    b = _param(rng, 4)
    rep = dg.grad_check(lambda x, w, b: dg.total(dg.sigmoid(dg.pointwise(x, w, b))), [x, w, b])
    assert rep.passed


def test_backward_sum_and_square(rng):
    x = dg.Parameter(rng.normal(size=(2, 3)))
    with dg.ComputeRecord() as rec:
        dg.backward(dg.total(x), rec)
    assert np.array_equal(x.grad, np.ones((2, 3)))
    x.zero_grad()
    with dg.ComputeRecord() as rec:
        dg.backward(dg.scale(dg.total(dg.mul(x, x)), 0.5), rec)
    assert np.allclose(x.grad, x.data)


def test_backward_rejects_non_scalar():
    x = dg.Parameter(np.ones(3))
    with dg.ComputeRecord() as rec:
        y = dg.scale(x, 2.0)
        with pytest.raises(ValueError):
            dg.backward(y, rec)


def test_unreachable_parameter_has_zero_grad(rng):
    used, unused = dg.Parameter(rng.normal(size=3)), dg.Parameter(rng.normal(size=3))
    with dg.ComputeRecord() as rec:
        dg.backward(dg.total(used), rec)
    assert not unused.grad.any()


def test_record_replays_in_reverse():
    x = dg.Parameter(np.ones(2))
    with dg.ComputeRecord() as rec:
        y = dg.scale(x, 3.0)
        z = dg.total(dg.relu(y))
    assert [n[0] for n in rec.nodes][-1] is z
    assert len(rec) == 3


def test_composite_bce_graph(rng):
    from tokenseg.objective import bce_loss

    x = _param(rng, 1, 4, 4, 4, name="x")
    w1 = _param(rng, 2, 1, 3, 3, 3, name="w1")
    w2 = _param(rng, 1, 2, name="w2")
    y = (rng.random((1, 4, 4, 4)) > 0.5).astype(float)

    def f(x, w1, w2):
        h = dg.relu(dg.conv3d(x, w1))
        return bce_loss(dg.sigmoid(dg.pointwise(h, w2)), y)

    rep = dg.grad_check(f, [x, w1, w2])
    assert rep.passed, rep.per_input


def test_grad_check_linear_exact(rng):
    c = rng.normal(size=(3, 4))
    rep = dg.grad_check(lambda x: dg.total(dg.mul(x, dg.Tensor(c))), [rng.normal(size=(3, 4))],
                        tol=1e-6)
    assert rep.passed and rep.max_rel_error < 1e-9


def test_grad_check_sigmoid_sum(rng):
    rep = dg.grad_check(lambda x: dg.sigmoid(dg.total(x)), [rng.normal(size=(2, 3)) * 0.3])
    assert rep.passed


def test_grad_check_negative_control(rng):
    def flipped(x):
        return dg.make_op(np.array(x.data.sum() ** 2), (x,),
                          lambda g: (-g * 2 * x.data.sum() * np.ones_like(x.data),))

    rep = dg.grad_check(flipped, [rng.random(4) + 0.5])
    assert not rep.passed


def test_forward_bitwise_deterministic(rng):
    x = dg.Tensor(rng.normal(size=(3, 6, 6, 6)))
    w = dg.Tensor(rng.normal(size=(4, 3, 3, 3, 3)))
    a = dg.conv3d(x, w, stride=2).data
    b = dg.conv3d(x, w, stride=2).data
    assert a.tobytes() == b.tobytes()


shapes = st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))


@given(shapes, st.integers(0, 10**6), st.sampled_from(["conv1", "conv2", "pool", "up", "pw"]))
def test_kernels_gradcheck_property(shape, seed, kind):
    r = np.random.default_rng(seed)
    c = shape[0]
    x = dg.Parameter(r.normal(size=shape), "x")
    if kind.startswith("conv"):
        w = dg.Parameter(r.normal(size=(2, c, 3, 3, 3)) * 0.3, "w")
        stride = int(kind[-1])
        fn = lambda x, w: dg.total(dg.sigmoid(dg.conv3d(x, w, stride=stride)))  # noqa: E731
        ins = [x, w]
    elif kind == "pool":
        fn = lambda x: dg.total(dg.sigmoid(dg.avg_pool3d(x, (2, 2, 1))))  # noqa: E731
        ins = [x]
    elif kind == "up":
        fn = lambda x: dg.total(dg.sigmoid(dg.upsample2_trilinear(x)))  # noqa: E731
        ins = [x]
    else:
        w = dg.Parameter(r.normal(size=(3, c)), "w")
        fn = lambda x, w: dg.total(dg.sigmoid(dg.pointwise(x, w)))  # noqa: E731
        ins = [x, w]
    rep = dg.grad_check(fn, ins, max_entries=40, seed=seed)
    assert rep.passed, rep.per_input
