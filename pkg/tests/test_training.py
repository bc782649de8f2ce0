import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikeprobe.neurons import NetworkSpec, forward_sequence, hidden_key, init_params
from spikeprobe.numerics import finite_diff_grad
from spikeprobe.tasks import AlSpec, DatasetMeta, SequenceDataset, al_dataset
from spikeprobe.training import (
    BACKWARD,
    ContractError,
    DataError,
    OptimizerState,
    TrainingAborted,
    TrainPlan,
    _backward,
    backward_notd,
    backward_sdbp,
    backward_stbp,
    clip_and_step,
    clip_grads,
    cross_entropy,
    fit,
    forward_mode_for,
    global_norm,
)

ARCHS = [
    ("sfnn", "lif", "mean"),
    ("srnn", "lif", "mean"),
    ("sfnn", "spsn", "last"),
    ("srnn", "lif", "per_step"),
    ("sfnn", ("lif", "notd"), "mean"),
    ("srnn", ("spsn", "lif"), "last"),
]


def oracle_net(arch, neuron, ro, decay=0.8, seed=3, hidden=(4, 5), T=5):
    spec = NetworkSpec(arch, 3, hidden, 3, neuron, ro, decay=decay, threshold=0.5, width=0.6,
                       kernel_size=3)
    params = init_params(spec, seed, dtype=np.float64)
    for k in params:
        params[k] = params[k] * 2.5  # push membranes into the surrogate window
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1.2, (2, T, 3))
    y = np.array([0, 2])
    return spec, params, x, y


def flat(params):
    return np.concatenate([p.ravel() for p in params.values()])


def unflat(params, theta):
    out, i = {}, 0
    for k, p in params.items():
        out[k] = theta[i:i + p.size].reshape(p.shape)
        i += p.size
    return out


def grads_for(spec, params, x, y, alg, spike_fn="hard", **kw):
    logits, tr = forward_sequence(spec, params, x, mode=forward_mode_for(alg), spike_fn=spike_fn)
    _, d = cross_entropy(logits, y)
    return BACKWARD[alg](spec, params, tr, d, **kw)


def smoothed_loss(spec, params, x, y, mode):
    def f(theta):
        logits, _ = forward_sequence(spec, unflat(params, theta), x, mode=mode, spike_fn="smooth")
        return cross_entropy(logits, y)[0]
    return f


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros((4, 2)), np.array([0, 1, 1, 0]))
        assert loss == pytest.approx(np.log(2))

    def test_confident(self):
        loss, g = cross_entropy(np.array([[1e3, 0.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_gradient_oracle(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(5, 3))
        y = rng.integers(0, 3, 5)
        _, g = cross_entropy(z, y)
        fd = finite_diff_grad(lambda t: cross_entropy(t.reshape(5, 3), y)[0], z.ravel(), 1e-6)
        np.testing.assert_allclose(g.ravel(), fd, atol=1e-7)

    def test_softmax_minus_onehot(self):
        z = np.array([[1.0, 2.0, 0.5]])
        _, g = cross_entropy(z, np.array([1]))
        p = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(g, p - np.array([[0, 1, 0]]), atol=1e-12)

    @pytest.mark.parametrize("labels", [[2], [-1]])
    def test_invalid_label(self, labels):
        with pytest.raises(DataError):
            cross_entropy(np.zeros((1, 2)), np.array(labels))

    def test_per_step_labels_broadcast(self):
        z = np.random.default_rng(1).normal(size=(2, 4, 3))
        a, _ = cross_entropy(z, np.array([1, 2]))
        b, _ = cross_entropy(z, np.array([[1] * 4, [2] * 4]))
        assert a == b


class TestOracle:
    @pytest.mark.parametrize("arch,neuron,ro", ARCHS)
    def test_stbp_matches_finite_differences(self, arch, neuron, ro):
        spec, params, x, y = oracle_net(arch, neuron, ro)
        g = grads_for(spec, params, x, y, "stbp", spike_fn="smooth")
        fd = finite_diff_grad(smoothed_loss(spec, params, x, y, "temporal"), flat(params), 1e-6)
        assert np.linalg.norm(fd) > 1e-3  # the check must not be vacuous
        assert rel_err(flat(g), fd) <= 1e-4

    @pytest.mark.parametrize("arch,neuron,ro", ARCHS)
    def test_notd_matches_finite_differences(self, arch, neuron, ro):
        spec, params, x, y = oracle_net(arch, neuron, ro)
        g = grads_for(spec, params, x, y, "notd", spike_fn="smooth")
        fd = finite_diff_grad(smoothed_loss(spec, params, x, y, "notd"), flat(params), 1e-6)
        assert rel_err(flat(g), fd) <= 1e-4

    def test_tiny_222_network(self):
        spec = NetworkSpec("sfnn", 2, (2,), 2, "lif", "mean", decay=0.7, width=0.6)
        params = {k: v * 3 for k, v in init_params(spec, 1, dtype=np.float64).items()}
        x = np.random.default_rng(2).uniform(0, 1, (1, 3, 2))
        y = np.array([1])
        g = grads_for(spec, params, x, y, "stbp", spike_fn="smooth")
        fd = finite_diff_grad(smoothed_loss(spec, params, x, y, "temporal"), flat(params), 1e-6)
        np.testing.assert_allclose(flat(g), fd, atol=1e-5)


class TestNesting:
    @pytest.mark.parametrize("arch,neuron,ro", ARCHS)
    def test_sdbp_is_stbp_without_temporal_terms(self, arch, neuron, ro):
        spec, params, x, y = oracle_net(arch, neuron, ro)
        sd = grads_for(spec, params, x, y, "sdbp")
        st_ = grads_for(spec, params, x, y, "stbp", zero_temporal=True)
        np.testing.assert_allclose(flat(sd), flat(st_), atol=1e-7, rtol=0)

    @pytest.mark.parametrize("arch,neuron,ro", ARCHS)
    def test_single_step_collapse(self, arch, neuron, ro):
        spec, params, x, y = oracle_net(arch, neuron, ro, T=1)
        spec = NetworkSpec(**{**spec.__dict__, "kernel_size": 1})
        for k in list(params):
            if k.endswith("kernel"):
                params[k] = params[k][:1]
        g = {alg: flat(grads_for(spec, params, x, y, alg)) for alg in ("stbp", "sdbp", "notd")}
        np.testing.assert_allclose(g["stbp"], g["sdbp"], atol=1e-9, rtol=0)
        np.testing.assert_allclose(g["stbp"], g["notd"], atol=1e-9, rtol=0)

    @pytest.mark.parametrize("seed", range(4))
    def test_zero_decay_collapse(self, seed):
        spec, params, x, y = oracle_net("sfnn", "lif", "mean", decay=0.0, seed=seed)
        a = grads_for(spec, params, x, y, "stbp")
        b = grads_for(spec, params, x, y, "sdbp")
        np.testing.assert_allclose(flat(a), flat(b), atol=1e-7, rtol=0)

    def test_sdbp_differs_when_time_matters(self):
        spec, params, x, y = oracle_net("sfnn", "lif", "mean")
        a = grads_for(spec, params, x, y, "stbp")
        b = grads_for(spec, params, x, y, "sdbp")
        assert rel_err(flat(b), flat(a)) > 1e-3

    @pytest.mark.parametrize("alg", ["stbp", "sdbp", "notd"])
    def test_zero_error_signal(self, alg):
        spec, params, x, _ = oracle_net("srnn", "lif", "mean")
        logits, tr = forward_sequence(spec, params, x, mode=forward_mode_for(alg))
        g = BACKWARD[alg](spec, params, tr, np.zeros_like(logits))
        assert all(np.all(v == 0) for v in g.values())

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 1000))
    def test_notd_time_permutation(self, seed):
        spec, params, x, y = oracle_net("sfnn", "lif", "mean", seed=seed % 7)
        rng = np.random.default_rng(seed)
        perm = rng.permutation(x.shape[1])
        a = grads_for(spec, params, x, y, "notd")
        b = grads_for(spec, params, x[:, perm], y, "notd")
        np.testing.assert_allclose(flat(a), flat(b), atol=1e-12)

    def test_grad_keys_mirror_params(self):
        spec, params, x, y = oracle_net("srnn", ("spsn", "lif"), "mean")
        for alg in ("stbp", "sdbp", "notd"):
            g = grads_for(spec, params, x, y, alg)
            assert list(g) == list(params)
            assert all(g[k].shape == params[k].shape for k in params)

    @pytest.mark.parametrize("temporal", [True, False])
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_fused_backward_matches_reference(self, temporal, dtype):
        spec = NetworkSpec("sfnn", 4, (16, 12), 2, "lif", "mean", decay=0.9)
        params = {k: v * 2 for k, v in init_params(spec, 0, dtype=dtype).items()}
        x = np.eye(4, dtype=dtype)[np.random.default_rng(0).integers(0, 4, (8, 30))]
        logits, tr = forward_sequence(spec, params, x)
        _, d = cross_entropy(logits, np.arange(8) % 2)
        a = _backward(spec, params, tr, d, temporal=temporal, fused=True)
        b = _backward(spec, params, tr, d, temporal=temporal, fused=False)
        for k in a:
            np.testing.assert_allclose(a[k], b[k], rtol=1e-5 if dtype == np.float32 else 1e-12,
                                       atol=1e-7)


class TestContracts:
    def test_stbp_rejects_notd_trace(self):
        spec, params, x, y = oracle_net("sfnn", "lif", "mean")
        logits, tr = forward_sequence(spec, params, x, mode="notd")
        with pytest.raises(ContractError):
            backward_stbp(spec, params, tr, np.zeros_like(logits))
        with pytest.raises(ContractError):
            backward_sdbp(spec, params, tr, np.zeros_like(logits))

    def test_notd_rejects_temporal_trace(self):
        spec, params, x, y = oracle_net("sfnn", "lif", "mean")
        logits, tr = forward_sequence(spec, params, x)
        with pytest.raises(ContractError):
            backward_notd(spec, params, tr, np.zeros_like(logits))

    def test_error_shape(self):
        spec, params, x, y = oracle_net("sfnn", "lif", "mean")
        _, tr = forward_sequence(spec, params, x)
        with pytest.raises(ContractError):
            backward_stbp(spec, params, tr, np.zeros((5, 5)))


class TestOptimizer:
    def plan(self, **kw):
        return TrainPlan(**{"lr": 0.1, "clip": 0.0, "weight_decay": 0.0, **kw})

    def test_clip_halves(self):
        g = {"a": np.array([2.0, 0.0]), "b": np.array([0.0])}
        c = clip_grads(g, 1.0)
        np.testing.assert_allclose(c["a"], [1.0 / (1 + 1e-6 / 2) / 1, 0.0], rtol=1e-6)
        assert global_norm(c) <= 1.0 + 1e-6

    @settings(max_examples=30, deadline=None)
    @given(scale=st.floats(1e-3, 1e3), clip=st.floats(0.01, 10))
    def test_clip_bound(self, scale, clip):
        rng = np.random.default_rng(0)
        g = {"w": rng.normal(size=(3, 4)) * scale, "b": rng.normal(size=2) * scale}
        assert global_norm(clip_grads(g, clip)) <= clip + 1e-6

    def test_zero_grads_no_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        st_ = OptimizerState.zeros_like(p)
        clip_and_step(p, {"w": np.zeros(2)}, st_, self.plan())
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert st_.step == 1

    def test_single_scalar_hand_computed(self):
        lr, wd, g, w0 = 0.01, 0.1, 0.3, 0.7
        p = {"w": np.array([w0])}
        st_ = OptimizerState.zeros_like(p)
        clip_and_step(p, {"w": np.array([g])}, st_, self.plan(lr=lr, weight_decay=wd))
        m = 0.1 * g
        v = 0.001 * g * g
        expected = w0 * (1 - lr * wd) - lr * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
        assert p["w"][0] == pytest.approx(expected, abs=1e-10)

    def test_two_steps_hand_computed(self):
        lr = 0.05
        p = {"w": np.array([0.0])}
        st_ = OptimizerState.zeros_like(p)
        m = v = 0.0
        w = 0.0
        for t, g in enumerate([1.0, -0.5], start=1):
            clip_and_step(p, {"w": np.array([g])}, st_, self.plan(lr=lr))
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            assert p["w"][0] == pytest.approx(w, abs=1e-12)

    def test_non_finite_aborts(self):
        p = {"w": np.zeros(2)}
        with pytest.raises(TrainingAborted):
            clip_and_step(p, {"w": np.array([np.inf, 0])}, OptimizerState.zeros_like(p), self.plan())

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(lr=0.0), dict(lr=-1.0),
                                    dict(algorithm="bptt"), dict(batch_size=0), dict(clip=-1)])
    def test_plan_validation(self, kw):
        with pytest.raises(ValueError):
            TrainPlan(**kw)


def tiny_al(n=48, length=12, seed=0):
    al = AlSpec(length=length, n_train=n, n_test=16, seed=seed)
    return al_dataset(al, "train"), al_dataset(al, "test")


class TestFit:
    spec = NetworkSpec(hidden=(8, 8))

    @pytest.mark.parametrize("alg", ["stbp", "sdbp", "notd"])
    def test_deterministic(self, alg):
        train, test = tiny_al()
        plan = TrainPlan(algorithm=alg, epochs=2, batch_size=16, seed=4)
        p1, r1 = fit(self.spec, train, plan, test=test)
        p2, r2 = fit(self.spec, train, plan, test=test)
        for k in p1:
            assert p1[k].tobytes() == p2[k].tobytes()
        assert r1.to_dict(timing=False) == r2.to_dict(timing=False)

    def test_report_shape(self):
        train, test = tiny_al()
        seen = []
        _, r = fit(self.spec, train, TrainPlan(epochs=3, batch_size=20), test=test,
                   callbacks=[lambda e, p, rep: seen.append(e)])
        assert seen == [0, 1, 2] and r.epochs == [1, 2, 3]
        assert r.steps == 3 * 3 and len(r.step_seconds) == r.steps
        assert len(r.test_acc) == 3 and 0 <= r.final_test_acc <= 1
        assert r.steps_per_second > 0

    def test_loss_decreases_on_easy_task(self):
        # label = first action is go-straight: solvable from a single step
        rng = np.random.default_rng(0)
        a = rng.integers(0, 4, (128, 6))
        x = np.eye(4, dtype=np.float32)[a]
        y = (a[:, 0] == 2).astype(np.uint32)
        ds = SequenceDataset(x, y, DatasetMeta(128, 6, 4, 2))
        spec = NetworkSpec(hidden=(16,), decay=1.0)
        init = {k: v * 3 for k, v in init_params(spec, 0).items()}
        _, r = fit(spec, ds, TrainPlan(epochs=15, batch_size=32, lr=1e-2), params=init)
        assert r.train_loss[-1] < r.train_loss[0] - 0.05

    def test_empty_dataset(self):
        ds = SequenceDataset(np.zeros((0, 3, 4), np.float32), np.zeros(0, np.uint32),
                             DatasetMeta(0, 3, 4, 2))
        with pytest.raises(DataError):
            fit(self.spec, ds, TrainPlan(epochs=1))

    def test_channel_mismatch(self):
        ds = SequenceDataset(np.zeros((2, 3, 5), np.float32), np.zeros(2, np.uint32),
                             DatasetMeta(2, 3, 5, 2))
        with pytest.raises(DataError):
            fit(self.spec, ds, TrainPlan(epochs=1))

    def test_recurrent_grad_present(self):
        spec = NetworkSpec("srnn", hidden=(6,))
        params = {k: v * 4 for k, v in init_params(spec, 0, dtype=np.float64).items()}
        x = np.eye(4)[np.random.default_rng(0).integers(0, 4, (4, 10))]
        g = grads_for(spec, params, x, np.array([0, 1, 0, 1]), "sdbp")
        assert np.any(g[hidden_key(0, "recurrent")] != 0)
