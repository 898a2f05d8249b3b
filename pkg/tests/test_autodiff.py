import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcunroll import autodiff as ad
from hcunroll.autodiff import Graph, Tensor
from hcunroll.errors import ContractError, ShapeError


def _param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _direct_conv(x, k, b=None):
    """Loop-based cross-correlation with zero padding, independent of im2col."""
    cout, cin, kh, kw = k.shape
    _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    out = np.zeros((cout, h, w))
    for o in range(cout):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = np.sum(k[o] * xp[:, i:i + kh, j:j + kw])
        if b is not None:
            out[o] += b[o]
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((1, 5, 4))
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_center_scaling(self):
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 2.0
        out = ad.conv2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), Tensor(k))
        np.testing.assert_array_equal(out.data, [[[2.0, 4.0], [6.0, 8.0]]])

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 5, 6))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b))
        np.testing.assert_allclose(out.data, _direct_conv(x, k, b), rtol=1e-13, atol=1e-13)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        x, k, b = _param(rng, 2, 4, 4), _param(rng, 3, 2, 3, 3), _param(rng, 3)
        err = ad.finite_diff_check(lambda: ad.sum_(ad.conv2d(x, k, b)), [x, k, b], h=1e-6)
        assert err < 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))

    def test_linear_in_input(self):
        rng = np.random.default_rng(3)
        k = Tensor(rng.standard_normal((4, 2, 3, 3)))
        x, y = rng.standard_normal((2, 2, 6, 6))
        a, b = 0.7, -1.3
        lhs = ad.conv2d(Tensor(a * x + b * y), k).data
        rhs = a * ad.conv2d(Tensor(x), k).data + b * ad.conv2d(Tensor(y), k).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


class TestRelu:
    def test_definition(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_negative_input(self):
        x = Tensor(-np.arange(1.0, 5.0), requires_grad=True)
        with Graph() as g:
            loss = ad.sum_(ad.relu(x))
        assert loss.item() == 0.0
        np.testing.assert_array_equal(ad.gradients(g, loss, [x])[0], np.zeros(4))

    def test_subgradient_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        with Graph() as g:
            loss = ad.sum_(ad.relu(x))
        assert ad.gradients(g, loss, [x])[0][0] == 0.0

    def test_finite_differences_away_from_kink(self):
        rng = np.random.default_rng(4)
        data = rng.standard_normal(50)
        data = data[np.abs(data) > 1e-3]
        x = Tensor(data, requires_grad=True)
        w = rng.standard_normal(data.size)
        assert ad.finite_diff_check(lambda: ad.vdot(ad.relu(x), Tensor(w)), [x]) < 1e-6


class TestConcat:
    def test_single_input_unchanged(self):
        t = Tensor(np.ones((2, 3, 3)))
        assert ad.concat_channels([t]) is t

    def test_order(self):
        a = Tensor(np.zeros((2, 3, 3)))
        b = Tensor(np.ones((2, 3, 3)))
        out = ad.concat_channels([a, b]).data
        assert out.shape == (4, 3, 3)
        np.testing.assert_array_equal(out[:2], 0)
        np.testing.assert_array_equal(out[2:], 1)

    def test_gradient_split(self):
        a = Tensor(np.zeros((1, 2, 2)), requires_grad=True)
        b = Tensor(np.zeros((3, 2, 2)), requires_grad=True)
        with Graph() as g:
            loss = ad.sum_(ad.concat_channels([a, b]))
        ga, gb = ad.gradients(g, loss, [a, b])
        np.testing.assert_array_equal(ga, np.ones((1, 2, 2)))
        np.testing.assert_array_equal(gb, np.ones((3, 2, 2)))

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            ad.concat_channels([Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 3, 2)))])


class TestBackward:
    def test_sum(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Graph() as g:
            loss = ad.sum_(x)
        np.testing.assert_array_equal(ad.gradients(g, loss, [x])[0], np.ones((2, 3)))

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph() as g:
            loss = ad.sum_(x * x)
        np.testing.assert_array_equal(ad.gradients(g, loss, [x])[0], [2.0, 4.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph() as g:
            y = x * x
        with pytest.raises(ContractError):
            ad.backward(g, y)

    def test_composite_conv_relu(self):
        rng = np.random.default_rng(5)
        x, k, b = _param(rng, 2, 5, 5), _param(rng, 3, 2, 3, 3), _param(rng, 3)
        k2 = _param(rng, 1, 3, 3, 3)
        err = ad.finite_diff_check(
            lambda: ad.sum_(ad.conv2d(ad.relu(ad.conv2d(x, k, b)), k2)), [x, k, b, k2]
        )
        assert err < 1e-5

    def test_accumulation_over_consumers(self):
        x = Tensor([3.0], requires_grad=True)
        with Graph() as g:
            loss = ad.sum_(x * x + x + x)
        np.testing.assert_array_equal(ad.gradients(g, loss, [x])[0], [8.0])

    def test_unused_parameter_gets_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        with Graph() as g:
            loss = ad.sum_(x)
        np.testing.assert_array_equal(ad.gradients(g, loss, [x, unused])[1], np.zeros((2, 2)))

    def test_reverse_append_order(self):
        x = Tensor([1.0], requires_grad=True)
        with Graph() as g:
            y = x * 2.0
            z = y + x
            loss = ad.sum_(z)
        assert [n.op for n in g.nodes] == ["leaf", "mul", "add", "sum"]
        assert g.node_of(loss) == len(g) - 1

    def test_no_recording_without_graph(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        assert y._graph is None and not y.requires_grad

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        x, k = _param(rng, 2, 6, 6), _param(rng, 4, 2, 3, 3)

        def run():
            with Graph() as g:
                loss = ad.sum_(ad.relu(ad.conv2d(x, k)))
            return loss.item(), ad.gradients(g, loss, [x, k])

        (l1, g1), (l2, g2) = run(), run()
        assert l1 == l2
        for a, b in zip(g1, g2):
            np.testing.assert_array_equal(a, b)

    def test_nonfinite_raises(self):
        from hcunroll.errors import NumericalError

        with pytest.raises(NumericalError):
            ad.div(Tensor([1.0]), Tensor(0.0))


class TestFiniteDiffCheck:
    @pytest.mark.parametrize("h", [1e-7, 1e-6, 1e-5, 1e-4])
    def test_linear_exact(self, h):
        # roundoff in f is about ulp(f) / h, so keep |f| modest next to |c_i|
        rng = np.random.default_rng(7)
        c = Tensor(rng.choice([-1, 1], 8) * rng.uniform(0.5, 2.0, 8))
        p = Tensor(0.1 * rng.standard_normal(8), requires_grad=True)
        assert ad.finite_diff_check(lambda: ad.vdot(c, p), [p], h=h) < 1e-9

    def test_quadratic(self):
        p = Tensor(np.random.default_rng(8).standard_normal(10), requires_grad=True)
        with Graph() as g:
            loss = ad.vdot(p, p)
        np.testing.assert_allclose(ad.gradients(g, loss, [p])[0], 2 * p.data, rtol=1e-15)
        assert ad.finite_diff_check(lambda: ad.vdot(p, p), [p], h=1e-5) < 1e-8

    def test_rejects_nonpositive_step(self):
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            ad.finite_diff_check(lambda: ad.sum_(p), [p], h=0.0)


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: ad.sum_(a * b),
        lambda a, b: ad.sum_(a - b) + ad.vdot(a, a),
        lambda a, b: ad.norm2(a - b),
        lambda a, b: ad.sum_(ad.abs_(a)) / ad.norm2(b),
        lambda a, b: ad.sum_(ad.softplus(a) * b),
        lambda a, b: ad.sum_(ad.upsample2(ad.avg_pool2(a)) * b),
        lambda a, b: ad.vdot(ad.concat_channels([a, b]), ad.concat_channels([b, a])),
    ],
)
def test_ops_gradcheck(fn):
    rng = np.random.default_rng(9)
    a, b = _param(rng, 2, 4, 4), _param(rng, 2, 4, 4)
    assert ad.finite_diff_check(lambda: fn(a, b), [a, b]) < 1e-4


def test_scalar_broadcast_gradient():
    s = Tensor(0.5, requires_grad=True)
    x = Tensor(np.arange(4.0), requires_grad=True)
    assert ad.finite_diff_check(lambda: ad.sum_(s * x * x) + s, [s, x]) < 1e-6


def test_softplus_pins_minus_inf_at_zero():
    raw = Tensor(ad.inverse_softplus(0.0), requires_grad=True)
    assert ad.softplus(raw).item() == 0.0
    for v in (1e-3, 0.05, 1.0, 7.0):
        assert ad.softplus(Tensor(ad.inverse_softplus(v))).item() == pytest.approx(v, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_conv_linearity_property(a, b, seed):
    rng = np.random.default_rng(seed)
    k = Tensor(rng.standard_normal((2, 3, 3, 3)))
    x, y = rng.standard_normal((2, 3, 5, 5))
    lhs = ad.conv2d(Tensor(a * x + b * y), k).data
    rhs = a * ad.conv2d(Tensor(x), k).data + b * ad.conv2d(Tensor(y), k).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)
