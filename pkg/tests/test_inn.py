import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_verify import inn as innm
from robust_verify import net as nn
from robust_verify._validation import InvalidInputError

SPEC = nn.NetworkSpec(2, (6, 5))


def constant_net(value, d=1):
    spec = nn.NetworkSpec(d, (1,))
    return nn.Network(spec, (np.zeros((1, d)), np.zeros((1, 1))), (np.zeros(1), np.array([value])))


def random_inn(seed, k=3, spec=SPEC):
    return innm.ImpreciseNet(tuple(nn.init_random(spec, seed * 10 + i) for i in range(k)))


def loss_oracle(inn, X, y, beta):
    """Per-sample summation written independently of inn.py."""
    total = 0.0
    for x, t in zip(X, y):
        outs = [nn.forward(m, x) for m in inn.members]
        up, lo = max(outs), min(outs)
        total += max(t - up, 0.0) ** 2 + max(lo - t, 0.0) ** 2 + beta * (up - lo)
    return total / len(y)


class TestEnvelopes:
    def test_single_member(self):
        inn = random_inn(0, k=1)
        lo, hi = innm.phi_bounds(inn, [0.3, -0.4])
        assert lo == hi == nn.forward(inn.members[0], [0.3, -0.4])
        assert innm.uncertainty(inn, [0.3, -0.4]) == 0.0

    def test_min_max(self):
        inn = innm.ImpreciseNet(tuple(constant_net(v) for v in (1.0, 2.0, 0.5)))
        assert innm.phi_bounds(inn, [0.0]) == (0.5, 2.0)
        assert innm.uncertainty(inn, [0.0]) == 1.5

    def test_matches_member_fold(self):
        inn = random_inn(3)
        for x in np.random.default_rng(0).normal(size=(20, 2)):
            outs = [nn.forward(m, x) for m in inn.members]
            assert innm.phi_bounds(inn, x) == (min(outs), max(outs))

    def test_ordering_and_finiteness(self):
        inn = random_inn(5)
        X = np.random.default_rng(1).uniform(-3, 3, size=(10_000, 2))
        lo, hi = innm.phi_bounds_batch(inn, X)
        assert np.all(lo <= hi)
        U = innm.uncertainty_batch(inn, X)
        assert np.all(U >= 0) and np.all(np.isfinite(U))

    def test_identical_members_zero_uncertainty(self):
        m = nn.init_random(SPEC, 4)
        inn = innm.ImpreciseNet((m, m, m))
        X = np.random.default_rng(2).normal(size=(200, 2))
        assert np.all(innm.uncertainty_batch(inn, X) == 0)

    def test_monotone_when_adding_member(self):
        inn = random_inn(6, k=2)
        bigger = innm.ImpreciseNet(inn.members + (nn.init_random(SPEC, 999),))
        X = np.random.default_rng(3).normal(size=(100, 2))
        assert np.all(innm.uncertainty_batch(bigger, X) >= innm.uncertainty_batch(inn, X))

    def test_mixed_specs_rejected(self):
        with pytest.raises(InvalidInputError):
            innm.ImpreciseNet((nn.init_random(SPEC, 0), nn.init_random(nn.NetworkSpec(2, (3,)), 0)))

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            innm.phi_bounds(random_inn(0), [1.0, 2.0, 3.0])

    def test_normaliser(self):
        inn = random_inn(1)
        scaled = innm.ImpreciseNet(inn.members, np.array([1.0, -2.0]), np.array([2.0, 0.5]))
        x = np.array([3.0, -1.5])
        assert innm.phi_bounds(scaled, x) == innm.phi_bounds(inn, (x - [1.0, -2.0]) / [2.0, 0.5])


class TestIntervalLoss:
    def test_inside_interval(self):
        inn = innm.ImpreciseNet((constant_net(1.0), constant_net(3.0)))
        assert innm.interval_loss(inn, [[0.0]], [2.0], 0.1) == pytest.approx(0.1 * 2.0)

    def test_above_upper(self):
        inn = innm.ImpreciseNet((constant_net(1.0), constant_net(3.0)))
        assert innm.interval_loss(inn, [[0.0]], [3.5], 0.1) == pytest.approx(0.25 + 0.2)

    def test_matches_straight_line(self):
        rng = np.random.default_rng(0)
        inn = random_inn(2)
        X = rng.normal(size=(32, 2))
        y = rng.normal(size=32)
        got = innm.interval_loss(inn, X, y, 1e-3)
        assert got == pytest.approx(loss_oracle(inn, X, y, 1e-3), rel=1e-12)

    def test_empty_batch(self):
        with pytest.raises(InvalidInputError):
            innm.interval_loss(random_inn(0), np.zeros((0, 2)), [], 1e-3)


def _params(inn):
    return [[np.array(a) for a in m.weights + m.biases] for m in inn.members]


def _rebuild(inn, params):
    members = []
    for m, ps in zip(inn.members, params):
        L = m.n_layers
        members.append(nn.Network(m.spec, tuple(ps[:L]), tuple(ps[L:])))
    return innm.ImpreciseNet(tuple(members))


def well_separated(inn, X, y, margin=1e-4):
    F = innm.member_outputs(inn, X)
    s = np.sort(F, axis=0)
    if F.shape[0] > 1 and (np.min(s[1] - s[0]) < margin or np.min(s[-1] - s[-2]) < margin):
        return False
    if min(np.abs(y - s[-1]).min(), np.abs(y - s[0]).min()) < margin:
        return False
    Z = inn.normalize(X)
    for m in inn.members:
        for z in nn._forward_cache(m, Z)[:-1]:
            if np.abs(z).min() < 1e-4:
                return False
    return True


def check_grads_fd(inn, X, y, beta, h=1e-5, rtol=1e-3):
    grads = innm.interval_loss_grads(inn, X, y, beta)
    params = _params(inn)
    worst = 0.0
    for i, g in enumerate(grads):
        for p_index, analytic in enumerate(g.weights + g.biases):
            arr = params[i][p_index]
            numeric = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = innm.interval_loss(_rebuild(inn, params), X, y, beta)
                arr[idx] = orig - h
                down = innm.interval_loss(_rebuild(inn, params), X, y, beta)
                arr[idx] = orig
                numeric[idx] = (up - down) / (2 * h)
            err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-5)
            worst = max(worst, float(err.max()))
    return worst


class TestGradients:
    def test_single_member_is_squared_error(self):
        m = nn.init_random(nn.NetworkSpec(2, (4,)), 1)
        inn = innm.ImpreciseNet((m,))
        X = np.random.default_rng(0).normal(size=(8, 2))
        y = np.random.default_rng(1).normal(size=8)
        g = innm.interval_loss_grads(inn, X, y, 0.5)[0]
        f = nn.forward_batch(m, X)
        want = nn.backward_batch(m, X, 2 * (f - y) / len(y))
        for a, b in zip(g.weights + g.biases, want.weights + want.biases):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_routing_to_argmax(self):
        members = (constant_net(0.0), constant_net(1.0), constant_net(0.5))
        inn = innm.ImpreciseNet(members)
        g = innm.interval_loss_grads(inn, [[0.0]], [3.0], 0.1)
        # d/d(bias of output) for member 2 (index 1): -2 * (3 - 1) + beta
        assert g[1].biases[1][0] == pytest.approx(-4.0 + 0.1)
        assert g[0].biases[1][0] == pytest.approx(-0.1)  # argmin gets only the width term
        assert g[2].biases[1][0] == 0.0

    def test_ties_go_to_lowest_index(self):
        inn = innm.ImpreciseNet((constant_net(1.0), constant_net(1.0)))
        g = innm.interval_loss_grads(inn, [[0.0]], [2.0], 0.1)
        # k-member tie: member 0 is both argmax and argmin, width terms cancel
        assert g[0].biases[1][0] == pytest.approx(-2.0)
        assert g[1].biases[1][0] == 0.0

    def test_finite_differences(self):
        rng = np.random.default_rng(7)
        done = 0
        seed = 0
        while done < 5:
            seed += 1
            inn = random_inn(seed, spec=nn.NetworkSpec(2, (4, 3)))
            X = rng.normal(size=(6, 2))
            y = rng.normal(size=6)
            if not well_separated(inn, X, y):
                continue
            assert check_grads_fd(inn, X, y, 1e-2) < 1e-3
            done += 1


class TestStationarity:
    def test_hinges_zero(self):
        inn = innm.ImpreciseNet((constant_net(-100.0), constant_net(100.0)))
        X = np.zeros((5, 1))
        y = np.linspace(-1, 1, 5)
        assert innm.stationarity_residuals(inn, X, y, 0.02) == (0.01, 0.01)

    def test_half_exceed(self):
        inn = innm.ImpreciseNet((constant_net(0.0), constant_net(1.0)))
        delta = 0.3
        X = np.zeros((4, 1))
        y = np.array([1.0 + delta, 1.0 + delta, 0.5, 0.5])
        up, lo = innm.stationarity_residuals(inn, X, y, 0.02)
        assert up == pytest.approx(abs(delta / 2 - 0.01))
        assert lo == pytest.approx(0.01)


class TestTrain:
    def test_constant_target_converges(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, size=(64, 2))
        y = np.full(64, 0.7)
        inn = innm.init_inn(SPEC, 3, seed=1)
        cfg = innm.TrainConfig(beta=1e-3, epochs=300, batch_size=16, lr=3e-3, seed=2)
        trained, trace = innm.train(inn, X, y, cfg)
        lo, hi = innm.phi_bounds_batch(trained, X)
        violation = np.maximum(0.7 - hi, 0) + np.maximum(lo - 0.7, 0)
        assert violation.mean() < 0.01
        assert len(trace) == cfg.epochs
        assert trace[-1] < trace[0]

    def test_deterministic(self):
        X = np.random.default_rng(1).normal(size=(40, 2))
        y = np.sin(X[:, 0])
        cfg = innm.TrainConfig(epochs=5, batch_size=8, seed=3)
        a, ta = innm.train(innm.init_inn(SPEC, 3, 0), X, y, cfg)
        b, tb = innm.train(innm.init_inn(SPEC, 3, 0), X, y, cfg)
        assert a == b and ta == tb

    def test_cold_start_reinitialises(self):
        X = np.random.default_rng(1).normal(size=(10, 2))
        y = X[:, 0]
        cfg = innm.TrainConfig(epochs=1, seed=3, warm_start=False)
        a, _ = innm.train(innm.init_inn(SPEC, 3, 0), X, y, cfg)
        b, _ = innm.train(innm.init_inn(SPEC, 3, 99), X, y, cfg)
        assert a == b

    def test_divergence_reported(self):
        X = np.random.default_rng(1).normal(size=(10, 2))
        y = np.full(10, 1e200)
        cfg = innm.TrainConfig(epochs=3, seed=0)
        with pytest.raises(innm.TrainingDivergedError) as info:
            innm.train(innm.init_inn(SPEC, 2, 0), X, y, cfg)
        assert info.value.epoch == 1

    def test_empty_data(self):
        with pytest.raises(InvalidInputError):
            innm.train(innm.init_inn(SPEC, 2, 0), np.zeros((0, 2)), [], innm.TrainConfig())

    def test_bad_config(self):
        with pytest.raises(InvalidInputError):
            innm.TrainConfig(beta=0.0)
        with pytest.raises(InvalidInputError):
            innm.TrainConfig(epochs=0)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        inn = innm.ImpreciseNet(random_inn(1).members, np.array([0.5, 1.0]), np.array([2.0, 3.0]))
        path = tmp_path / "inn.json"
        innm.save(inn, path)
        assert innm.load(path) == inn

    def test_format_fields(self):
        obj = innm.to_dict(random_inn(0))
        assert obj["format"] == "robust-verify-inn/1"
        assert obj["k"] == 3 and len(obj["members"]) == 3

    def test_single_net_file_loads(self, tmp_path):
        m = nn.init_random(SPEC, 0)
        path = tmp_path / "net.json"
        path.write_bytes(nn.serialize(m))
        assert innm.load(path).members == (m,)

    def test_k_mismatch(self):
        obj = innm.to_dict(random_inn(0))
        obj["k"] = 2
        with pytest.raises(nn.NetworkParseError):
            innm.from_dict(obj)


class TestRegressor:
    def test_fit_predict(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, size=(200, 2))
        y = X[:, 0] - 0.5 * X[:, 1]
        reg = innm.ImpreciseNetRegressor(hidden_widths=(16, 16), epochs=60, batch_size=32,
                                         learning_rate=3e-3, input_box=([-1, -1], [1, 1]))
        reg.fit(X, y)
        lo, hi = reg.predict_bounds(X)
        assert np.all(lo <= hi)
        assert reg.score(X, y) > 0.9
        iv = reg.predict_interval(X, lam=20)
        np.testing.assert_allclose(iv[:, 1] - iv[:, 0] - (hi - lo), 2 * 20 * 1e-3, atol=1e-12)
        assert reg.get_params()["n_members"] == 3

    def test_box_input(self):
        from robust_verify.verify import Box
        X = np.random.default_rng(0).uniform(0, 4, size=(20, 2))
        reg = innm.ImpreciseNetRegressor(epochs=1, input_box=Box([0, 0], [4, 4])).fit(X, X[:, 0])
        np.testing.assert_array_equal(reg.inn_.input_offset, [2.0, 2.0])
        np.testing.assert_array_equal(reg.inn_.input_scale, [2.0, 2.0])

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            innm.ImpreciseNetRegressor().predict(np.zeros((1, 2)))

    def test_clone(self):
        from sklearn.base import clone
        reg = innm.ImpreciseNetRegressor(beta=1e-2, epochs=3)
        assert clone(reg).get_params() == reg.get_params()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=5), st.floats(-5, 5))
def test_loss_non_negative(values, target):
    inn = innm.ImpreciseNet(tuple(constant_net(v) for v in values))
    assert innm.interval_loss(inn, [[0.0]], [target], 1e-3) >= 0.0
