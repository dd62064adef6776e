import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_verify import net as nn
from robust_verify._validation import InvalidInputError


def straight_line_forward(weights, biases, x):
    """Independent evaluator: explicit loops, no shared code with net.py."""
    h = list(x)
    for l, (W, b) in enumerate(zip(weights, biases)):
        out = []
        for i in range(len(b)):
            s = b[i]
            for j in range(len(h)):
                s += W[i][j] * h[j]
            out.append(s if l == len(weights) - 1 else max(s, 0.0))
        h = out
    return h[0]


def hand_net(layers, input_dim):
    widths = [len(b) for _, b in layers[:-1]]
    spec = nn.NetworkSpec(input_dim, tuple(widths))
    return nn.Network(spec, tuple(np.array(w, float) for w, _ in layers),
                      tuple(np.array(b, float) for _, b in layers))


def one_neuron_net():
    return hand_net([([[1.0]], [-1.0]), ([[1.0]], [0.0])], 1)


def central_difference(fn, arr, h=1e-5):
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        up = fn()
        arr[idx] = orig - h
        down = fn()
        arr[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def min_abs_preactivation(net, x):
    return min(np.abs(z).min() for z in nn.pre_activations(net, x))


class TestSpecAndInit:
    def test_invalid_specs(self):
        with pytest.raises(InvalidInputError):
            nn.NetworkSpec(2, ())
        with pytest.raises(InvalidInputError):
            nn.NetworkSpec(0, (3,))
        with pytest.raises(InvalidInputError):
            nn.NetworkSpec(2, (3,), output_dim=2)

    def test_deterministic(self):
        spec = nn.NetworkSpec(3, (5, 4))
        assert nn.init_random(spec, 7) == nn.init_random(spec, 7)
        assert nn.init_random(spec, 7) != nn.init_random(spec, 8)

    def test_layer_shapes(self):
        net = nn.init_random(nn.NetworkSpec(17, (50, 50)), 0)
        assert net.weights[0].shape == (50, 17)
        assert net.weights[1].shape == (50, 50)
        assert net.weights[2].shape == (1, 50)
        assert all(np.all(b == 0) for b in net.biases)

    def test_he_std(self):
        # 100000 / 17 rows -> ~1e5 draws for the first layer
        net = nn.init_random(nn.NetworkSpec(17, (5883,)), 3)
        w = net.weights[0].ravel()
        assert w.size >= 100_000
        assert abs(w.std() / np.sqrt(2 / 17) - 1) < 0.05
        assert abs(w.mean()) < 0.01

    def test_parameters_are_read_only(self):
        net = nn.init_random(nn.NetworkSpec(2, (3,)), 0)
        with pytest.raises(ValueError):
            net.weights[0][0, 0] = 1.0

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            hand_net([([[np.nan]], [0.0]), ([[1.0]], [0.0])], 1)


class TestForward:
    def test_identity(self):
        net = hand_net([([[1.0]], [0.0]), ([[1.0]], [0.0])], 1)
        assert nn.forward(net, [3.5]) == 3.5

    def test_relu_clamps(self):
        assert nn.forward(one_neuron_net(), [0.5]) == 0.0

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(0)
        for seed in range(10):
            net = nn.init_random(nn.NetworkSpec(4, (50, 50)), seed)
            x = rng.normal(size=4)
            want = straight_line_forward([w.tolist() for w in net.weights],
                                         [b.tolist() for b in net.biases], x.tolist())
            got = nn.forward(net, x)
            assert got == pytest.approx(want, rel=1e-12, abs=1e-12)

    def test_batch_agrees_with_single(self):
        net = nn.init_random(nn.NetworkSpec(3, (8, 8)), 1)
        X = np.random.default_rng(1).normal(size=(20, 3))
        np.testing.assert_allclose(nn.forward_batch(net, X), [nn.forward(net, x) for x in X])

    def test_dimension_mismatch(self):
        net = nn.init_random(nn.NetworkSpec(3, (4,)), 0)
        with pytest.raises(InvalidInputError):
            nn.forward(net, [1.0, 2.0])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), xseed=st.integers(0, 2**31))
    def test_piecewise_affine_within_cell(self, seed, xseed):
        net = nn.init_random(nn.NetworkSpec(3, (6, 6)), seed)
        rng = np.random.default_rng(xseed)
        x, d = rng.normal(size=3), rng.normal(size=3)
        signs0 = [np.sign(z) for z in nn.pre_activations(net, x)]
        ts = np.sort(rng.uniform(0, 1e-3, size=10))
        ts = [t for t in ts
              if all(np.array_equal(np.sign(z), s)
                     for z, s in zip(nn.pre_activations(net, x + t * d), signs0))]
        f0 = nn.forward(net, x)
        if not ts:
            return
        slope = (nn.forward(net, x + ts[-1] * d) - f0) / ts[-1]
        for t in ts:
            assert nn.forward(net, x + t * d) == pytest.approx(f0 + slope * t, abs=1e-9)


class TestBackward:
    def test_linear_layer(self):
        net = hand_net([([[2.0, -1.0]], [1.0]), ([[1.0]], [0.0])], 2)
        x = np.array([0.7, 0.2])
        g = nn.backward(net, x, 1.0)
        np.testing.assert_array_equal(g.weights[0], [[0.7, 0.2]])
        np.testing.assert_array_equal(g.biases[0], [1.0])
        np.testing.assert_array_equal(g.input_gradient, [2.0, -1.0])

    def test_zero_upstream(self):
        net = nn.init_random(nn.NetworkSpec(3, (5, 5)), 0)
        g = nn.backward(net, [0.1, 0.2, 0.3], 0.0)
        assert all(np.all(w == 0) for w in g.weights)
        assert all(np.all(b == 0) for b in g.biases)
        assert np.all(g.input_gradient == 0)

    def test_relu_subgradient_at_zero(self):
        net = one_neuron_net()
        g = nn.backward(net, [1.0], 1.0)  # pre-activation exactly 0
        assert g.input_gradient[0] == 0.0
        assert g.weights[0][0, 0] == 0.0

    def test_finite_differences_100_pairs(self):
        rng = np.random.default_rng(123)
        checked = 0
        seed = 0
        while checked < 100:
            seed += 1
            net = nn.init_random(nn.NetworkSpec(3, (5, 4)), seed)
            x = rng.normal(size=3)
            if min_abs_preactivation(net, x) < 1e-3:
                continue
            up = rng.normal()
            g = nn.backward(net, x, up)
            ws = [np.array(w) for w in net.weights]
            bs = [np.array(b) for b in net.biases]

            def value():
                return up * nn.forward(nn.Network(net.spec, tuple(ws), tuple(bs)), x)

            for analytic, arr in zip(g.weights + g.biases, ws + bs):
                numeric = central_difference(value, arr)
                scale = np.maximum(np.abs(numeric), 1e-6)
                assert np.all(np.abs(analytic - numeric) / scale < 1e-4)
            xin = x.copy()
            numeric = central_difference(lambda: up * nn.forward(net, xin), xin)
            assert np.allclose(g.input_gradient, numeric, rtol=1e-4, atol=1e-9)
            checked += 1


def adam_reference(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(p)
    return out


class TestOptimizer:
    def setup_method(self):
        self.net = nn.init_random(nn.NetworkSpec(2, (3,)), 5)
        self.state = nn.OptimizerState.for_network(self.net)

    def test_zero_gradients(self):
        new, state = nn.optimizer_step(self.net, nn.Gradients.zeros_like(self.net), self.state)
        assert new == self.net
        assert state.step == self.state.step + 1

    def test_first_step_matches_reference(self):
        g = nn.Gradients.zeros_like(self.net)
        g.weights[0][1, 0] = 0.37
        g.biases[1][0] = -2.5
        new, _ = nn.optimizer_step(self.net, g, self.state)
        p0 = self.net.weights[0][1, 0]
        assert new.weights[0][1, 0] == pytest.approx(adam_reference(p0, [0.37])[0], rel=1e-14)
        assert new.biases[1][0] == pytest.approx(adam_reference(0.0, [-2.5])[0], rel=1e-14)
        # first bias-corrected step has magnitude ~lr, against the gradient sign
        assert new.weights[0][1, 0] - p0 == pytest.approx(-1e-3, rel=1e-6)

    def test_trace_matches_reference(self):
        seq = [0.5, -0.2, 0.9, 0.0, 1.3]
        net, state = self.net, self.state
        p0 = net.weights[1][0, 2]
        for g in seq:
            grads = nn.Gradients.zeros_like(net)
            grads.weights[1][0, 2] = g
            net, state = nn.optimizer_step(net, grads, state)
        assert state.step == len(seq)
        assert net.weights[1][0, 2] == pytest.approx(adam_reference(p0, seq)[-1], rel=1e-13)

    def test_shape_mismatch(self):
        g = nn.Gradients.zeros_like(self.net)
        g.weights[0] = np.zeros((2, 2))
        with pytest.raises(InvalidInputError):
            nn.optimizer_step(self.net, g, self.state)


class TestSerialization:
    def test_round_trip_bit_exact(self):
        net = nn.init_random(nn.NetworkSpec(3, (7, 5)), 11)
        back = nn.deserialize(nn.serialize(net))
        assert back == net
        for a, b in zip(net.weights, back.weights):
            assert a.tobytes() == b.tobytes()

    def test_format_tag(self):
        obj = json.loads(nn.serialize(nn.init_random(nn.NetworkSpec(1, (2,)), 0)))
        assert obj["format"] == "robust-verify-net/1"
        assert set(obj) == {"format", "spec", "layers"}

    def test_truncated_payload(self):
        data = nn.serialize(nn.init_random(nn.NetworkSpec(3, (4,)), 0))
        with pytest.raises(nn.NetworkParseError) as info:
            nn.deserialize(data[: len(data) // 2])
        assert info.value.offset is not None
        assert 0 <= info.value.offset <= len(data) // 2

    def test_wrong_shapes(self):
        obj = json.loads(nn.serialize(nn.init_random(nn.NetworkSpec(2, (3,)), 0)))
        obj["layers"][0]["w"] = [[1.0]]
        with pytest.raises(nn.NetworkParseError):
            nn.deserialize(json.dumps(obj).encode())

    def test_hand_written_file(self):
        text = b"""{"format": "robust-verify-net/1",
                    "spec": {"input_dim": 1, "hidden_widths": [1], "output_dim": 1,
                             "activation": "relu"},
                    "layers": [{"w": [[1.0]], "b": [-1.0]}, {"w": [[1.0]], "b": [0.0]}]}"""
        net = nn.deserialize(text)
        assert nn.forward(net, [0.5]) == 0.0
        assert net == one_neuron_net()
