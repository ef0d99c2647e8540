import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitrl.nets import (
    AdamState,
    DenseNet,
    Layer,
    adam_step,
    make_net,
    net_backward,
    net_directional_param_grads,
    net_forward,
    net_from_dict,
    net_to_dict,
    softmax,
)

from oracles import central_diff_params, mlp_eval, rel_err


def random_net(rng, dims=None, act="tanh"):
    if dims is None:
        dims = [4, 7, 5, 3]
    return make_net(dims, rng, hidden_activation=act)


class TestForward:
    def test_zero_weights_returns_bias(self):
        b = np.array([0.3, -1.2])
        net = DenseNet([Layer(np.zeros((2, 3)), b, "identity")])
        y, _ = net_forward(net, np.array([5.0, -2.0, 9.0]))
        np.testing.assert_array_equal(y, b)

    def test_identity_layer(self):
        net = DenseNet([Layer(np.eye(4), np.zeros(4), "identity")])
        x = np.array([1.0, -2.0, 0.5, 3.0])
        y, _ = net_forward(net, x)
        np.testing.assert_array_equal(y, x)

    def test_matches_straight_line_recomputation(self):
        rng = np.random.default_rng(0)
        net = random_net(rng)
        x = rng.normal(size=4)
        y, _ = net_forward(net, x)
        expected = mlp_eval([(l.weight, l.bias, l.activation) for l in net.layers], x)
        assert rel_err(y, expected) <= 1e-12

    def test_batched_matches_rowwise(self):
        # gemm vs gemv may differ in the last ulp, so not array_equal
        rng = np.random.default_rng(1)
        net = random_net(rng, act="elu")
        xs = rng.normal(size=(6, 4))
        yb, _ = net_forward(net, xs)
        for i in range(6):
            yi, _ = net_forward(net, xs[i])
            np.testing.assert_allclose(yb[i], yi, rtol=1e-13, atol=1e-15)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        net = random_net(rng)
        x = rng.normal(size=4)
        y1, _ = net_forward(net, x)
        y2, _ = net_forward(net, x)
        np.testing.assert_array_equal(y1, y2)

    def test_dimension_mismatch_raises(self):
        rng = np.random.default_rng(3)
        net = random_net(rng)
        with pytest.raises(ValueError):
            net_forward(net, np.zeros(5))


class TestBackward:
    def test_zero_cotangent_gives_zero_grads(self):
        rng = np.random.default_rng(4)
        net = random_net(rng)
        _, tape = net_forward(net, rng.normal(size=4))
        grads, gx = net_backward(net, tape, np.zeros(3))
        for g in grads.params():
            assert np.all(g == 0.0)
        assert np.all(gx == 0.0)

    def test_single_linear_layer_closed_form(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(3, 4))
        net = DenseNet([Layer(w, np.zeros(3), "identity")])
        x = rng.normal(size=4)
        g = rng.normal(size=3)
        _, tape = net_forward(net, x)
        grads, gx = net_backward(net, tape, g)
        np.testing.assert_allclose(grads.weights[0], np.outer(g, x), rtol=1e-15)
        np.testing.assert_allclose(grads.biases[0], g, rtol=1e-15)
        np.testing.assert_allclose(gx, w.T @ g, rtol=1e-14)

    @pytest.mark.parametrize("act", ["tanh", "elu", "relu"])
    def test_param_grads_match_finite_differences(self, act):
        rng = np.random.default_rng(6)
        net = random_net(rng, dims=[3, 6, 4, 2], act=act)
        x = rng.normal(size=3)
        gout = rng.normal(size=2)

        def scalar():
            y, _ = net_forward(net, x)
            return float(gout @ y)

        _, tape = net_forward(net, x)
        grads, gx = net_backward(net, tape, gout)
        fd = central_diff_params(scalar, net.params())
        for analytic, numeric in zip(grads.params(), fd):
            assert rel_err(analytic, numeric, floor=1e-6) <= 1e-4
        fd_x = central_diff_params(scalar, [x])[0]
        assert rel_err(gx, fd_x, floor=1e-6) <= 1e-4

    def test_many_random_gradient_checks(self):
        # The blanket substrate invariant: 100 random nets/inputs/cotangents.
        rng = np.random.default_rng(7)
        worst = 0.0
        for trial in range(100):
            dims = [int(rng.integers(2, 5)) for _ in range(int(rng.integers(2, 4)))]
            dims = [int(rng.integers(2, 5))] + dims
            act = ["tanh", "elu"][trial % 2]
            net = make_net(dims, rng, hidden_activation=act)
            x = rng.normal(size=dims[0])
            gout = rng.normal(size=dims[-1])

            def scalar():
                y, _ = net_forward(net, x)
                return float(gout @ y)

            _, tape = net_forward(net, x)
            grads, _ = net_backward(net, tape, gout)
            fd = central_diff_params(scalar, net.params())
            for analytic, numeric in zip(grads.params(), fd):
                worst = max(worst, rel_err(analytic, numeric, floor=1e-6))
        assert worst <= 1e-4

    def test_batched_grads_sum_over_rows(self):
        rng = np.random.default_rng(8)
        net = random_net(rng)
        xs = rng.normal(size=(5, 4))
        gs = rng.normal(size=(5, 3))
        _, tape = net_forward(net, xs)
        grads, gx = net_backward(net, tape, gs)
        acc = None
        for i in range(5):
            _, ti = net_forward(net, xs[i])
            gi, gxi = net_backward(net, ti, gs[i])
            np.testing.assert_allclose(gx[i], gxi, rtol=1e-12)
            if acc is None:
                acc = gi
            else:
                acc.add_(gi)
        for a, b in zip(grads.params(), acc.params()):
            np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_foreign_tape_rejected(self):
        rng = np.random.default_rng(9)
        n1, n2 = random_net(rng), random_net(rng)
        _, tape = net_forward(n1, rng.normal(size=4))
        with pytest.raises(ValueError):
            net_backward(n2, tape, np.zeros(3))


class TestDirectionalParamGrads:
    def test_matches_finite_differences_of_input_grad_norm(self):
        # grads of h = v . grad_x(f) for fixed v equal d/dtheta of that dot product
        rng = np.random.default_rng(10)
        net = make_net([4, 8, 5, 1], rng, hidden_activation="tanh")
        x = rng.normal(size=4)
        v = rng.normal(size=4)

        def h_of_params():
            _, tape = net_forward(net, x)
            _, gx = net_backward(net, tape, np.ones(1))
            return float(v @ gx)

        _, tape = net_forward(net, x)
        h, grads = net_directional_param_grads(net, tape, v, np.ones(1))
        assert abs(h - h_of_params()) <= 1e-10
        fd = central_diff_params(h_of_params, net.params())
        for analytic, numeric in zip(grads.params(), fd):
            assert rel_err(analytic, numeric, floor=1e-6) <= 1e-4

    def test_batched_rows_independent(self):
        rng = np.random.default_rng(11)
        net = make_net([3, 6, 1], rng)
        xs = rng.normal(size=(4, 3))
        vs = rng.normal(size=(4, 3))
        _, tape = net_forward(net, xs)
        hb, gb = net_directional_param_grads(net, tape, vs, np.ones((4, 1)))
        acc = None
        for i in range(4):
            _, ti = net_forward(net, xs[i])
            hi, gi = net_directional_param_grads(net, ti, vs[i], np.ones(1))
            assert abs(hb[i] - hi) <= 1e-12
            if acc is None:
                acc = gi
            else:
                acc.add_(gi)
        for a, b in zip(gb.params(), acc.params()):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = [np.array([1.0, -2.0]), np.array([[3.0]])]
        st_ = AdamState(p, lr=0.1)
        adam_step(p, [np.zeros(2), np.zeros((1, 1))], st_)
        np.testing.assert_array_equal(p[0], [1.0, -2.0])
        np.testing.assert_array_equal(p[1], [[3.0]])
        assert st_.step_count == 1

    def test_first_step_magnitude_and_sign(self):
        # bias-corrected first step moves by ~lr against the gradient sign
        for g in (0.7, -2.5):
            p = [np.array([0.0])]
            st_ = AdamState(p, lr=1e-3)
            adam_step(p, [np.array([g])], st_)
            assert np.sign(p[0][0]) == -np.sign(g)
            assert abs(abs(p[0][0]) - 1e-3) < 1e-6

    def test_two_steps_equal_one_double_lr_step_only_without_momentum(self):
        # With beta1 = beta2 = 0 the update is state-free, so two unit steps
        # regroup exactly into one double-length step.  With momentum the
        # moment recursions carry memory (seeded here by a warm-up gradient
        # so the memory is visible) and the grouping changes the result.
        g0 = [np.array([2.0, -1.0])]
        g = [np.array([0.8, -1.3])]

        def run(betas, lr, n_steps):
            p = [np.array([0.5, 0.5])]
            s = AdamState(p, lr=1e-2, beta1=betas[0], beta2=betas[1])
            adam_step(p, g0, s)  # warm-up seeds the moments
            s.lr = lr
            for _ in range(n_steps):
                adam_step(p, g, s)
            return p[0]

        np.testing.assert_allclose(
            run((0.0, 0.0), 1e-2, 2), run((0.0, 0.0), 2e-2, 1), atol=1e-15
        )
        diff = run((0.9, 0.999), 1e-2, 2) - run((0.9, 0.999), 2e-2, 1)
        assert np.max(np.abs(diff)) > 1e-9

    def test_nan_gradient_raises_and_preserves_params(self):
        p = [np.array([1.0, 2.0])]
        st_ = AdamState(p, lr=0.1)
        adam_step(p, [np.array([0.5, 0.5])], st_)
        snapshot = p[0].copy()
        m_snap = st_.m[0].copy()
        with pytest.raises(FloatingPointError):
            adam_step(p, [np.array([np.nan, 0.0])], st_)
        np.testing.assert_array_equal(p[0], snapshot)
        np.testing.assert_array_equal(st_.m[0], m_snap)


class TestSoftmax:
    def test_uniform_on_zeros(self):
        np.testing.assert_allclose(softmax(np.zeros(3)), np.ones(3) / 3, rtol=1e-15)

    def test_saturation(self):
        y = softmax(np.array([100.0, 0.0, 0.0]))
        assert y[0] >= 1.0 - 1e-20

    def test_shift_invariance(self):
        w = np.array([0.3, -1.0, 2.5])
        np.testing.assert_array_equal(softmax(w), softmax(w + 7.0))

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(
            st.floats(min_value=-1e30, max_value=1e30, allow_nan=False),
            min_size=1,
            max_size=8,
        )
    )
    def test_probability_vector_for_any_finite_input(self, ws):
        y = softmax(np.array(ws))
        assert np.all(np.isfinite(y))
        assert np.all(y >= 0.0)
        assert abs(float(y.sum()) - 1.0) <= 1e-12


class TestSerialization:
    def test_bit_exact_round_trip(self):
        rng = np.random.default_rng(12)
        net = make_net([5, 9, 4], rng, hidden_activation="elu")
        # deliberately awkward values
        net.layers[0].weight[0, 0] = np.nextafter(1.0, 2.0)
        net.layers[1].bias[1] = -0.0
        restored = net_from_dict(net_to_dict(net))
        for a, b in zip(net.params(), restored.params()):
            assert a.shape == b.shape
            assert np.array_equal(a.view(np.uint64), b.view(np.uint64))
        doc = net_to_dict(net)
        assert doc["manifest"]["layers"][0]["activation"] == "elu"

    def test_wrong_length_rejected(self):
        rng = np.random.default_rng(13)
        net = make_net([3, 2], rng)
        doc = net_to_dict(net)
        from gaitrl.nets import decode_array, net_from_manifest

        flat = decode_array(doc["flat"])
        with pytest.raises(ValueError):
            net_from_manifest(doc["manifest"], flat[:-1])
