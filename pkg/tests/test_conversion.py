import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ptlsnn.conversion import (
    ConversionError,
    ConversionReport,
    DegenerateLayerError,
    QuantSpec,
    discretize_potential,
    fold_batchnorm,
    fold_network,
    percentile_upper_bound,
    primitive_convert,
    quantize_activation,
    threshold_layer_norm,
)
from ptlsnn.nn import AnalogNet, BatchNorm, Dense, ReLU, train_analog
from ptlsnn.spiking import IFParams, simulate_currents


class TestPercentile:
    def test_nearest_rank(self):
        assert percentile_upper_bound(np.arange(1, 101), 99) == 99

    def test_nearest_rank_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            v = rng.random(rng.integers(1, 300))
            p = rng.uniform(0.1, 100)
            k = int(np.ceil(p / 100 * v.size))
            assert percentile_upper_bound(v, p) == np.sort(v)[max(k, 1) - 1]

    def test_max(self):
        assert percentile_upper_bound([3.0, 9.0, 1.0], 100) == 9.0

    def test_constant(self):
        assert percentile_upper_bound(np.full(17, 2.5), 37.0) == 2.5

    def test_zeros_count(self):
        # zeros from dead units are part of the distribution
        assert percentile_upper_bound([0, 0, 0, 4.0], 50) == 0.0

    @pytest.mark.parametrize("p", [0, -1, 100.5])
    def test_bad_p(self, p):
        with pytest.raises(ValueError):
            percentile_upper_bound([1.0], p)

    def test_empty(self):
        with pytest.raises(ValueError):
            percentile_upper_bound(np.zeros(0), 99)


class TestThresholdLayerNorm:
    def test_examples(self):
        assert threshold_layer_norm(8, 16) == 0.5
        assert threshold_layer_norm(1, 1) == 1.0

    def test_dead_layer(self):
        with pytest.raises(DegenerateLayerError):
            threshold_layer_norm(0.0, 16)


def dense(W, b):
    d = Dense(np.shape(W)[1], np.shape(W)[0], dtype=np.float64)
    d.params["W"] = np.array(W, dtype=np.float64)
    d.params["b"] = np.array(b, dtype=np.float64)
    return d


def bn(gamma, beta, mean, var, eps):
    n = len(gamma)
    layer = BatchNorm(n, eps=eps, dtype=np.float64)
    layer.params["gamma"] = np.array(gamma, dtype=np.float64)
    layer.params["beta"] = np.array(beta, dtype=np.float64)
    layer.running_mean = np.array(mean, dtype=np.float64)
    layer.running_var = np.array(var, dtype=np.float64)
    return layer


class TestFoldBatchNorm:
    def test_identity_statistics(self):
        d = dense([[1.5, -2.0]], [0.25])
        f = fold_batchnorm(d, bn([1], [0], [0], [1], 0))
        np.testing.assert_array_equal(f.W, d.W)
        np.testing.assert_array_equal(f.b, d.b)

    def test_hand_example(self):
        f = fold_batchnorm(dense([[1.0]], [1.0]), bn([2], [0], [1], [3], 1))
        assert f.W.item() == 1.0 and f.b.item() == 0.0

    def test_feature_mismatch(self):
        with pytest.raises(ValueError):
            fold_batchnorm(dense(np.ones((2, 2)), [0, 0]), bn([1], [0], [0], [1], 0))

    @pytest.mark.parametrize("arch", ["10-7-3", "6x6-c3s2-c4s1-5"])
    def test_folded_matches_inference(self, arch):
        rng = np.random.default_rng(4)
        net = AnalogNet.from_architecture(arch, seed=1, dtype=np.float64)
        for layer in net.layers:
            if isinstance(layer, BatchNorm):
                n = layer.num_features
                layer.params["gamma"] = rng.uniform(0.5, 2, n)
                layer.params["beta"] = rng.standard_normal(n)
                layer.running_mean = rng.standard_normal(n)
                layer.running_var = rng.uniform(0.2, 3, n)
        x = rng.standard_normal((8,) + net.input_shape)
        ref = net.forward(x)
        out = fold_network(net).forward(x)
        assert np.max(np.abs(out - ref)) / np.max(np.abs(ref)) <= 1e-6

    def test_orphan_batchnorm(self):
        with pytest.raises(ConversionError):
            fold_network(AnalogNet([BatchNorm(4), ReLU(), Dense(4, 2)], (4,)))


class TestQuantizer:
    def test_examples(self):
        spec = QuantSpec(1.0, 4)
        assert quantize_activation(0.6, spec) == 0.5
        assert quantize_activation(-0.3, spec) == 0.0
        assert quantize_activation(1.7, spec) == 1.0

    def test_discretize_half_to_even(self):
        spec = QuantSpec(8.0, 16)
        assert discretize_potential(2.5 * 0.5, spec)[1] == 2
        assert discretize_potential(-1.0, spec) == (0.0, 0)
        assert discretize_potential(100.0, spec)[1] == 16

    def test_degenerate_spec(self):
        with pytest.raises(DegenerateLayerError):
            QuantSpec(0.0, 4)

    @settings(max_examples=100, deadline=None)
    @given(
        hnp.arrays(np.float64, st.integers(1, 50), elements=st.floats(-10, 10)),
        st.floats(0.01, 10),
        st.integers(1, 64),
    )
    def test_monotone(self, a, upper, levels):
        a = np.sort(a)
        q = quantize_activation(a, QuantSpec(upper, levels))
        assert np.all(np.diff(np.atleast_1d(q)) >= 0)

    def test_simulation_vs_quantizer(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            n = int(rng.integers(1, 33))
            thr = rng.uniform(0.05, 2)
            V = rng.uniform(-1, 1.3) * thr * n
            train, _ = simulate_currents(np.full((n, 1), V / n), IFParams(thr, n))
            implied = discretize_potential(V, QuantSpec(thr * n, n))[1]
            assert abs(int(train.counts[0]) - implied) <= 1


def small_net(arch="12-10-8-4", seed=0):
    rng = np.random.default_rng(seed)
    net = AnalogNet.from_architecture(arch, seed=seed)
    x = rng.random((300, 12)).astype(np.float32)
    y = (x[:, :4].argmax(1)).astype(np.int64)
    train_analog(net, x, y, epochs=3, batch_size=32, seed=seed)
    return fold_network(net), x


@pytest.fixture(scope="module")
def mnist_mlp():
    from ptlsnn.harness.data import default_mnist_dir, load_mnist_dir

    d = load_mnist_dir(default_mnist_dir())
    x, y = d["train"]
    xt, _ = d["test"]
    x, xt = x.reshape(len(x), -1), xt.reshape(len(xt), -1)
    net = AnalogNet.from_architecture("784-128-64-10", seed=0)
    train_analog(net, x, y, epochs=10, batch_size=128, seed=0)
    return fold_network(net), x[:512], xt


class TestPrimitiveConvert:
    def test_large_window_agrees_with_ann(self, mnist_mlp):
        net, x_calib, held = mnist_mlp
        snn, _ = primitive_convert(net, 2048, 99.9, x_calib)
        agree = np.mean(snn.forward(held).argmax(1) == net.forward(held).argmax(1))
        assert agree >= 0.99

    def test_encoded_layer_within_one_step(self, mnist_mlp):
        net, x_calib, held = mnist_mlp
        snn, rep = primitive_convert(net, 2048, 100.0, x_calib)
        a = np.maximum(net.layers[0].forward(held[:200]), 0)
        a = np.minimum(a, rep.upper_bounds[0])
        est = snn.layers[0].run(held[:200]).counts * rep.thresholds[0]
        # one step, plus float32 round-off accumulated over up to N_s subtractions
        tol = rep.thresholds[0] + 2048 * np.finfo(np.float32).eps * rep.upper_bounds[0]
        assert np.all(np.abs(est - a) <= tol)

    def test_single_layer_constant_activation(self):
        c = 1.75
        net = AnalogNet([dense([[1.0]], [0.0])], (1,))
        snn, rep = primitive_convert(net, 4, 99.9, np.full((10, 1), c))
        assert rep.thresholds == [c / 4]
        counts = snn.layers[0].run(np.array([[c]])).counts
        assert counts.tolist() == [[4]]

    def test_zero_bias_gives_zero_current(self):
        net, x = small_net()
        for layer in net.weight_layers:
            layer.params["b"][:] = 0
        _, rep = primitive_convert(net, 8, 99.9, x[:64])
        assert all(not np.any(i) for i in rep.injected_currents)

    def test_threshold_absorption(self):
        net, x = small_net()
        snn, rep = primitive_convert(net, 16, 99.0, x[:64])
        assert rep.roles == ["encode", "spike", "readout"]
        assert rep.input_scales == [1.0, rep.thresholds[0], rep.thresholds[1]]
        for sl, thr_prev in zip(snn.layers[1:], rep.thresholds):
            np.testing.assert_allclose(sl.effective_weight(), thr_prev * sl.W, rtol=1e-6)
            np.testing.assert_allclose(sl.injected_current, sl.b / 16, rtol=1e-6)

    def test_weight_absorption_soundness(self):
        # exact counts c = a / thr reproduce the next pre-activation
        net, x = small_net("12-10-4")
        snn, rep = primitive_convert(net, 64, 100.0, x[:64])
        a = np.maximum(net.layers[0].forward(x[:20]), 0)
        readout = snn.layers[1].readout_potential(a / rep.thresholds[0])
        np.testing.assert_allclose(readout, net.forward(x[:20]), rtol=1e-4, atol=1e-4)
        # with floored counts, the error per input neuron stays within one step
        counts = np.minimum(np.floor(a / rep.thresholds[0]), 64)
        err = np.abs(snn.layers[1].readout_potential(counts) - net.forward(x[:20]))
        bound = rep.thresholds[0] * np.abs(net.layers[2].W).sum(axis=1)
        assert np.all(err <= bound + 1e-5)

    def test_dead_layer_surfaces(self):
        net, x = small_net()
        net.layers[0].params["W"][:] = 0
        net.layers[0].params["b"][:] = -1
        with pytest.raises(DegenerateLayerError):
            primitive_convert(net, 8, 99.9, x[:32])

    def test_unfolded_rejected(self):
        net = AnalogNet.from_architecture("12-10-4")
        with pytest.raises(ConversionError):
            primitive_convert(net, 8, 99.9, np.zeros((4, 12), np.float32))

    def test_report_round_trip(self):
        net, x = small_net()
        _, rep = primitive_convert(net, 8, 99.9, x[:64])
        back = ConversionReport.from_text(rep.to_text())
        assert back.to_text() == rep.to_text()
        assert back.thresholds == rep.thresholds
