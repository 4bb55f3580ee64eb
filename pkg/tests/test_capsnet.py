import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sentinel import numerics as nx
from sentinel.capsnet import (
    CapsNet,
    CheckpointError,
    ConfigError,
    ModelConfig,
    TrainingError,
    count_params,
    init_params,
    load_checkpoint,
    predict_from_probs,
    primary_capsules,
    route,
    save_checkpoint,
    train,
)
from tests.oracles import param_count_by_enumeration, route_one_iteration_naive

TINY = ModelConfig(
    width=16, n_classes=3, conv_filters=2, conv_kernel=3, pc_capsules=2, pc_dim=4, oc_dim=4, routing_iters=2
)


def _images(n, width, seed):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, width))


class TestConfig:
    def test_kernel_wider_than_input(self):
        with pytest.raises(ConfigError):
            ModelConfig(width=4, n_classes=2, conv_kernel=9)

    def test_zero_classes(self):
        with pytest.raises(ConfigError):
            ModelConfig(width=10, n_classes=0)

    def test_param_count_matches_enumeration(self):
        # F 2*3=6, V 2*4*(14*2)=224, Wt 2*3*4*4=96
        assert count_params(TINY) == 326
        assert count_params(TINY) == param_count_by_enumeration(TINY.param_shapes().values())

    @given(st.integers(4, 40), st.integers(1, 8), st.integers(1, 6))
    def test_param_count_property(self, width, n, filters):
        cfg = ModelConfig(width=width, n_classes=n, conv_filters=filters, conv_kernel=3, pc_dim=4, oc_dim=4)
        assert count_params(cfg) == param_count_by_enumeration(cfg.param_shapes().values())

    def test_doubling_filters_doubles_conv_params(self):
        a = TINY.param_shapes()["F"]
        b = ModelConfig(**{**TINY.to_dict(), "conv_filters": 4}).param_shapes()["F"]
        assert np.prod(b) == 2 * np.prod(a)

    def test_init_is_seeded(self):
        a, b = init_params(TINY), init_params(TINY)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
        c = init_params(ModelConfig(**{**TINY.to_dict(), "init_seed": 1}))
        assert not np.array_equal(a["V"], c["V"])

    def test_wrong_param_shape(self):
        params = init_params(TINY)
        params["F"] = np.zeros((3, 3))
        with pytest.raises(ConfigError):
            CapsNet(TINY, params)


class TestPrimaryAndRouting:
    def test_zero_projection_gives_zero_capsules(self):
        con = nx.Tensor(np.random.default_rng(0).uniform(size=(2, 14, 2)))
        u = primary_capsules(con, nx.Tensor(np.zeros((2, 4, 28))))
        assert np.all(u.data == 0.0)

    def test_capsule_norms_below_one(self):
        trace = CapsNet(TINY).forward(_images(5, 16, 1) * 50)
        assert np.all(np.linalg.norm(trace.u, axis=-1) < 1.0)
        assert np.all(trace.scores < 1.0)

    def test_single_iteration_couplings_are_uniform(self):
        rng = np.random.default_rng(2)
        u, wt = nx.Tensor(rng.normal(size=(1, 3, 4))), nx.Tensor(rng.normal(size=(3, 5, 2, 4)))
        trace = []
        route(u, wt, 1, trace)
        np.testing.assert_array_equal(trace[0], np.full((1, 3, 5), 0.2))

    def test_single_iteration_matches_naive(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            u, wt = rng.normal(size=(3, 4)), rng.normal(size=(3, 5, 2, 4))
            v = route(nx.Tensor(u[None]), nx.Tensor(wt), 1).data[0]
            np.testing.assert_allclose(v, route_one_iteration_naive(u.tolist(), wt.tolist()), atol=1e-12, rtol=0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_couplings_sum_to_one(self, seed, iters):
        cfg = ModelConfig(**{**TINY.to_dict(), "routing_iters": iters, "init_seed": seed})
        trace = CapsNet(cfg).forward(_images(3, 16, seed))
        assert len(trace.couplings) == iters
        for c in trace.couplings:
            np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-12)

    def test_zero_iterations_rejected(self):
        with pytest.raises(ConfigError):
            route(nx.Tensor(np.zeros((1, 2, 4))), nx.Tensor(np.zeros((2, 3, 4, 4))), 0)


class TestForward:
    def test_probabilities_normalised(self):
        p = CapsNet(TINY).predict_proba(_images(7, 16, 0))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_single_class_is_certain(self):
        cfg = ModelConfig(**{**TINY.to_dict(), "n_classes": 1})
        np.testing.assert_array_equal(CapsNet(cfg).predict_proba(_images(2, 16, 0)), [[1.0], [1.0]])

    def test_deterministic(self):
        net, x = CapsNet(TINY), _images(4, 16, 5)
        np.testing.assert_array_equal(net.predict_proba(x), net.predict_proba(x.copy()))

    def test_image_shape_accepted(self):
        net, x = CapsNet(TINY), _images(1, 16, 6)
        np.testing.assert_array_equal(net.predict_proba(x.reshape(1, 16, 1)), net.predict_proba(x))

    def test_width_mismatch(self):
        with pytest.raises(nx.ShapeError):
            CapsNet(TINY).predict(np.zeros((1, 15)))

    def test_output_depends_on_pixels(self):
        net, x = CapsNet(TINY), _images(1, 16, 7)
        p = net.predict_proba(x)
        rng = np.random.default_rng(0)
        diffs = [np.abs(net.predict_proba(x[:, rng.permutation(16)]) - p).max() for _ in range(5)]
        assert max(diffs) > 0

    def test_tie_goes_to_lowest_index(self):
        assert predict_from_probs(np.array([[0.4, 0.4, 0.2]]))[0] == 0
        assert predict_from_probs(np.array([[0.1, 0.45, 0.45]]))[0] == 1


def test_end_to_end_gradient_check():
    net = CapsNet(TINY)
    x = _images(2, 16, 11)
    labels = np.array([0, 2])
    _, grads, gx = net.loss_and_grads(x, labels, wrt_input=True)

    def loss_with(name, value):
        params = dict(net.params, **{name: value})
        return float(CapsNet(TINY, params).loss(x, labels).sum())

    for name, g in grads.items():
        fd = nx.central_difference(lambda z: loss_with(name, z), net.params[name])
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8)
    fd_x = nx.central_difference(lambda z: float(net.loss(z, labels).sum()), x)
    np.testing.assert_allclose(gx, fd_x, rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(net.input_gradient(x, labels), gx, atol=1e-15)


class TestTraining:
    def test_memorises_one_fingerprint(self):
        x = _images(1, 16, 3)
        result = train(CapsNet(TINY), x, [1], seed=0)
        assert float(result.model.loss(x, [1])[0]) < 0.01

    def test_loss_curve_is_deterministic(self):
        x, y = _images(6, 16, 4), [0, 1, 2, 0, 1, 2]
        a = train(CapsNet(TINY), x, y, seed=3, epochs=5)
        b = train(CapsNet(TINY), x, y, seed=3, epochs=5)
        assert a.loss_curve == b.loss_curve
        for k in a.model.params:
            np.testing.assert_array_equal(a.model.params[k], b.model.params[k])

    def test_does_not_mutate_input_model(self):
        net = CapsNet(TINY)
        before = {k: v.copy() for k, v in net.params.items()}
        train(net, _images(3, 16, 0), [0, 1, 2], epochs=2)
        for k in before:
            np.testing.assert_array_equal(net.params[k], before[k])

    def test_adversarial_objective_changes_result(self):
        from sentinel.adversarial import training_attack

        x, y = _images(6, 16, 4), [0, 1, 2, 0, 1, 2]
        clean = train(CapsNet(TINY), x, y, seed=1, epochs=3).model
        robust = train(CapsNet(TINY), x, y, adv=training_attack("FGSM"), seed=1, epochs=3).model
        assert not np.array_equal(clean.params["Wt"], robust.params["Wt"])

    def test_empty_training_set(self):
        with pytest.raises(TrainingError):
            train(CapsNet(TINY), np.zeros((0, 16)), [])

    def test_separable_three_classes(self):
        # one bright block of pixels per class
        rng = np.random.default_rng(0)
        x, y = [], []
        for label in range(3):
            for _ in range(10):
                row = rng.uniform(0.0, 0.2, size=16)
                row[label * 5 : label * 5 + 5] += 0.7
                x.append(row)
                y.append(label)
        x, y = np.array(x), np.array(y)
        model = train(CapsNet(TINY), x, y, seed=0, epochs=300).model
        assert np.mean(model.predict(x) == y) >= 0.95


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = CapsNet(TINY)
        save_checkpoint(net, tmp_path / "m.ckpt", {"note": "x"})
        loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta == {"note": "x"}
        assert loaded.config == TINY
        for k in net.params:
            np.testing.assert_array_equal(loaded.params[k], net.params[k])

    def test_layout(self, tmp_path):
        save_checkpoint(CapsNet(TINY), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:8] == b"SNTLCKPT"
        assert int.from_bytes(raw[8:12], "little") == 1
        header_len = int.from_bytes(raw[12:16], "little")
        assert len(raw) == 16 + header_len + 8 * count_params(TINY)

    def test_tampered_config_refused(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(CapsNet(TINY), path)
        raw = path.read_bytes()
        path.write_bytes(raw.replace(b'"routing_iters": 2', b'"routing_iters": 3'))
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(path)

    def test_expected_config_mismatch(self, tmp_path):
        save_checkpoint(CapsNet(TINY), tmp_path / "m.ckpt")
        other = ModelConfig(**{**TINY.to_dict(), "init_seed": 9})
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.ckpt", expected=other)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"hello world, not a model")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")
