import itertools
import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ptlsnn.conversion import fold_network, percentile_upper_bound, primitive_convert
from ptlsnn.metrics import evaluate_metrics
from ptlsnn.nn import AnalogNet, Adam, StateError, cross_entropy, train_analog
from ptlsnn.quantization import WeightQuantSpec, quantize_weights_kbit
from ptlsnn.spiking import IFParams, SpikeTrain, SpikingNet, simulate_currents
from ptlsnn.tandem import (
    BudgetExhaustedWarning,
    HybridNet,
    PrefixCache,
    SchedulerState,
    expected_spike_count,
    ptl_train,
    scheduler_update,
    scripted_stage_ends,
    stage_summary,
)

from .gradcheck import numeric_grad, rel_error


class TestExpectedSpikeCount:
    def test_examples(self):
        assert expected_spike_count([3], [1], 0, 1.0).tolist() == [3]
        assert expected_spike_count([4], [0.5], 2, 1.0).tolist() == [4]

    def test_negative_drive(self):
        assert expected_spike_count([3], [-1], 0.5, 1.0).tolist() == [0]

    def test_not_clipped(self):
        assert expected_spike_count([8], [2.0], 0, 1.0, n_steps=8).tolist() == [16]

    def test_counts_out_of_window(self):
        with pytest.raises(ValueError):
            expected_spike_count([9], [1], 0, 1.0, n_steps=8)

    @settings(max_examples=200, deadline=None)
    @given(
        st.integers(1, 32),
        st.floats(0.05, 2),
        hnp.arrays(np.float64, (3, 5), elements=st.floats(-1, 1)),
        hnp.arrays(np.float64, 3, elements=st.floats(-2, 2)),
        st.data(),
    )
    def test_surrogate_fidelity_even_current(self, n, thr, W, B, data):
        c = np.array(data.draw(st.lists(st.integers(0, n), min_size=5, max_size=5)), dtype=np.float64)
        c_hat = expected_spike_count(c, W, B, thr, n_steps=n)
        z = (W @ c + B) / n
        train, _ = simulate_currents(np.broadcast_to(z, (n, 3)), IFParams(thr, n))
        assert np.all(np.abs(train.counts - np.clip(c_hat, 0, n)) <= 1)


def reference_scheduler(losses, patience):
    """Independent transcription of the patience rule; returns (epoch index at which done or None, best index)."""
    best, best_i, t = math.inf, None, 0
    for i, v in enumerate(losses):
        if v < best:
            best, best_i, t = v, i, 0
        else:
            t += 1
        if t == patience:
            return i, best_i
    return None, best_i


class TestScheduler:
    def test_improvement_resets(self):
        s, done = scheduler_update(SchedulerState(3, t=2, best_loss=0.5), 0.4)
        assert (s.t, s.best_loss, done) == (0, 0.4, False)

    def test_no_improvement_increments(self):
        s, done = scheduler_update(SchedulerState(3, t=1, best_loss=0.5), 0.6)
        assert (s.t, s.best_loss, done) == (2, 0.5, False)

    def test_tie_is_not_improvement(self):
        s, _ = scheduler_update(SchedulerState(3, t=0, best_loss=0.5), 0.5)
        assert s.t == 1

    def test_nan_is_not_improvement(self):
        s, _ = scheduler_update(SchedulerState(3, t=0, best_loss=0.5), float("nan"))
        assert s.t == 1 and s.best_loss == 0.5

    def test_done_restores_best(self):
        restored = []
        s = SchedulerState(2, t=1, best_loss=0.3, snapshot="best")
        s, done = scheduler_update(s, 0.9, capture=lambda: "new", restore=restored.append)
        assert done and restored == ["best"]

    def test_capture_on_improvement_only(self):
        calls = []
        s = SchedulerState(2)
        s, _ = scheduler_update(s, 1.0, capture=lambda: calls.append(1) or "a")
        s, _ = scheduler_update(s, 2.0, capture=lambda: calls.append(2) or "b")
        assert calls == [1] and s.snapshot == "a"

    def test_state_not_mutated(self):
        s0 = SchedulerState(3, t=1, best_loss=0.5)
        scheduler_update(s0, 0.1)
        assert (s0.t, s0.best_loss) == (1, 0.5)

    def test_bad_patience(self):
        with pytest.raises(ValueError):
            SchedulerState(0)

    @pytest.mark.parametrize("patience", [1, 2, 3])
    def test_exhaustive_against_reference(self, patience):
        # every loss sequence over a 3-value alphabet up to length 7
        for n in range(1, 8):
            for seq in itertools.product((0.3, 0.5, 0.7), repeat=n):
                state, restored = SchedulerState(patience), []
                done_at = None
                for i, v in enumerate(seq):
                    state, done = scheduler_update(state, v, capture=lambda i=i: i, restore=restored.append)
                    assert 0 <= state.t <= patience
                    if done:
                        done_at = i
                        break
                ref_done, ref_best = reference_scheduler(seq, patience)
                assert done_at == ref_done, seq
                if done_at is not None:
                    assert restored == [ref_best]
                    assert state.best_loss == min(seq[: done_at + 1])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 6), st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=60))
    def test_best_non_increasing_and_liveness(self, patience, losses):
        state, best_prev, improvements = SchedulerState(patience), math.inf, 0
        for v in losses:
            state, done = scheduler_update(state, v)
            assert state.best_loss <= best_prev
            improvements += state.t == 0
            best_prev = state.best_loss
            if done:
                break
        if done:
            # each improvement is followed by fewer than T_p misses, the last one by exactly T_p
            assert state.epochs <= patience * improvements + 1 <= patience * (improvements + 1)

    def test_scripted_sequence(self):
        losses = [1.0, 0.9, 0.95, 0.92, 0.8, 0.8, 0.7, 0.75, 0.71, 0.5, 0.6, 0.6]
        # stage 1: improve, improve, +1, +1 -> ends at epoch 4
        # stage 2: improve, tie +1, improve, +1, +1 -> ends at 9
        # stage 3: improve, +1, +1 -> ends at 12
        assert scripted_stage_ends(losses, 2, 3) == [4, 9, 12]

    def test_scripted_sequence_with_cap(self):
        losses = [1.0, 0.9, 0.95, 0.92, 0.8, 0.8, 0.7, 0.75, 0.71, 0.5, 0.6, 0.6]
        # cap 3: stage 1 stops at epoch 3; stage 2 sees 0.92, 0.8, 0.8 and hits the cap at 6;
        # stage 3 sees 0.7, 0.75, 0.71 and ends by patience at 9
        assert scripted_stage_ends(losses, 2, 3, stage_epoch_cap=3) == [3, 6, 9]

    def test_scripted_patience_one(self):
        assert scripted_stage_ends([3, 2, 2, 5, 5, 4, 4], 1, 3) == [3, 5, 7]

    def test_scripted_too_short(self):
        with pytest.raises(ValueError):
            scripted_stage_ends([1.0, 2.0], 1, 3)


# --------------------------------------------------------------------- hybrid network


def trained_mlp(arch="20-16-12-4", n=400, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    x = rng.random((n, int(arch.split("-")[0]))).astype(dtype)
    n_out = int(arch.split("-")[-1])
    y = (x[:, :n_out].argmax(1) + (x[:, 4] > 0.5)) % n_out
    net = AnalogNet.from_architecture(arch, seed=seed, dtype=dtype)
    train_analog(net, x, y, epochs=5, batch_size=32, seed=seed)
    return fold_network(net), x, y


def advance(h, calib, stages, percentile=99.9):
    for _ in range(stages):
        h.freeze_and_advance(calib, percentile)
    return h


class TestHybridForward:
    def test_stage_zero_is_ann(self):
        net, x, _ = trained_mlp()
        np.testing.assert_array_equal(HybridNet(net, 8).forward(x), net.forward(x))

    def test_completed_is_snn(self):
        net, x, _ = trained_mlp("20-6-3")
        h = advance(HybridNet(net, 8), x[:100], 3)
        assert h.completed
        snn = h.to_spiking_net()
        ref, _ = primitive_convert(net, 8, 99.9, x[:100])
        np.testing.assert_array_equal(h.forward(x), snn.forward(x))
        # two-layer net: hybrid thresholds equal the primitive ones (the prefix is the input itself)
        assert h.thresholds()[0] == ref.layers[0].threshold
        np.testing.assert_array_equal(snn.forward(x), ref.forward(x))

    def test_readout_stage_equals_full_snn(self):
        net, x, _ = trained_mlp()
        h = advance(HybridNet(net, 8), x[:100], 3)
        assert h.stage_layer.role == "readout"
        out = h.forward(x)
        h.freeze_and_advance(x[:100], 99.9)
        np.testing.assert_array_equal(out, h.forward(x))

    def test_zero_input_ignores_first_weights(self):
        net, x, _ = trained_mlp()
        h = advance(HybridNet(net, 8), x[:100], 2)
        zeros = np.zeros((3, 20), np.float32)
        before = h.forward(zeros)
        h.blocks[0].params["W"] = np.random.default_rng(1).standard_normal(h.blocks[0].W.shape).astype(np.float32)
        np.testing.assert_array_equal(h.forward(zeros), before)

    def test_unset_threshold(self):
        net, x, _ = trained_mlp()
        h = advance(HybridNet(net, 8), x[:100], 1)
        h.stage_layer.threshold = None
        with pytest.raises(StateError):
            h.forward(x[:4])

    def test_batchnorm_rejected(self):
        with pytest.raises(ValueError):
            HybridNet(AnalogNet.from_architecture("8-4-2"), 8)

    def test_not_completed(self):
        net, x, _ = trained_mlp()
        with pytest.raises(StateError):
            advance(HybridNet(net, 8), x[:100], 2).to_spiking_net()

    def test_suffix_fed_simulated_counts(self):
        net, x, _ = trained_mlp()
        h = advance(HybridNet(net, 8), x[:100], 2)
        out = h.forward(x[:10])
        u = h.last_stage_counts * h.stage_layer.threshold
        ref = h.blocks[2].linear(u.astype(np.float32), h.blocks[2].W, h.blocks[2].b)
        np.testing.assert_allclose(out, ref, rtol=1e-6)

    def test_threshold_from_hybrid_activations(self):
        net, x, _ = trained_mlp()
        h = advance(HybridNet(net, 4), x[:100], 2)
        hybrid_ub = percentile_upper_bound(h.hybrid_activations(2, x[:100]), 99.9)
        analog_ub = percentile_upper_bound(np.maximum(net.layers[2].forward(np.maximum(net.layers[0].forward(x[:100]), 0)), 0), 99.9)
        assert h.stage_layer.threshold == pytest.approx(hybrid_ub / 4, rel=1e-12)
        assert hybrid_ub != analog_ub


class TestHybridBackward:
    def test_backward_before_forward(self):
        net, x, _ = trained_mlp()
        h = advance(HybridNet(net, 8), x[:100], 2)
        with pytest.raises(StateError):
            h.backward(np.ones((2, 4)))

    def test_zero_input_counts_zero_weight_grad(self):
        net, x, y = trained_mlp()
        h = advance(HybridNet(net, 8), x[:100], 2)
        silent = SpikeTrain(np.zeros((8, 5, 16), np.uint8))
        out = h.forward(x[:5], prefix=silent, train=True)
        _, g = cross_entropy(out, y[:5])
        grads = h.backward(g)
        assert not np.any(grads[0])

    @pytest.mark.parametrize("stage", [1, 2, 3])
    def test_surrogate_path_finite_differences(self, stage):
        net, x, y = trained_mlp(dtype=np.float64)
        h = advance(HybridNet(net, 8), x[:100], stage)
        xb, yb = x[:12], y[:12]
        prefix = h.prefix_spikes(xb)
        x_in = h._analog_input(stage, prefix, xb)
        layer = h.blocks[stage - 1]
        out = h.forward(xb, prefix=prefix, train=True)
        _, g = cross_entropy(out, yb)
        grads = h.backward(g)
        if stage == h.n_layers:
            # readout: the coupled layer is exact
            def objective():
                return cross_entropy(layer.linear(x_in, layer.W, layer.b), yb)[0]

        else:
            # suffix gradient at the simulated counts, pulled back through relu(W x_in + b)
            u = h.last_stage_counts * h.stage_layer.threshold
            h._suffix_forward(u, stage + 1, True)
            g_u = h._suffix_backward(g)

            def objective():
                return float(np.sum(g_u * np.maximum(layer.linear(x_in, layer.W, layer.b), 0)))

        assert rel_error(grads[0], numeric_grad(objective, layer.params["W"]), floor=1e-8) <= 1e-5
        assert rel_error(grads[1], numeric_grad(objective, layer.params["b"]), floor=1e-8) <= 1e-5

    def test_suffix_gradients_exact(self):
        net, x, y = trained_mlp(dtype=np.float64)
        h = advance(HybridNet(net, 8), x[:100], 1)
        xb, yb = x[:12], y[:12]
        out = h.forward(xb, train=True)
        _, g = cross_entropy(out, yb)
        grads = h.backward(g)
        u = h.last_stage_counts * h.stage_layer.threshold

        def loss():
            return cross_entropy(h._suffix_forward(u, 2, False), yb)[0]

        for got, arr in zip(grads[2:], [h.blocks[1].params["W"], h.blocks[1].params["b"], h.blocks[2].params["W"], h.blocks[2].params["b"]]):
            assert rel_error(got, numeric_grad(loss, arr), floor=1e-8) <= 1e-5

    def test_frozen_prefix_untouched_by_step(self):
        net, x, y = trained_mlp()
        h = advance(HybridNet(net, 8), x[:100], 2)
        W0 = h.blocks[0].W.copy()
        opt = Adam(h.trainable_parameters(), lr=1e-2)
        out = h.forward(x[:32], train=True)
        opt.step(h.backward(cross_entropy(out, y[:32])[1]))
        np.testing.assert_array_equal(h.blocks[0].W, W0)
        assert not h.blocks[0].W.flags.writeable
        with pytest.raises(ValueError):
            h.blocks[0].params["W"][0, 0] = 1.0


class TestSharing:
    def test_shared_equals_master_without_quantization(self):
        net, x, y = trained_mlp()
        h = advance(HybridNet(net, 8), x[:100], 2)
        opt = Adam(h.trainable_parameters(), lr=1e-2)
        for _ in range(3):
            out = h.forward(x[:32], train=True)
            opt.step(h.backward(cross_entropy(out, y[:32])[1]))
            h.refresh_shared()
            assert h.stage_layer.W is h.blocks[1].W

    def test_shared_is_quantized_master(self):
        net, x, y = trained_mlp()
        spec = WeightQuantSpec(4)
        h = advance(HybridNet(net, 8, quant=spec), x[:100], 2)
        opt = Adam(h.trainable_parameters(), lr=1e-2)
        for _ in range(3):
            out = h.forward(x[:32], train=True)
            opt.step(h.backward(cross_entropy(out, y[:32])[1]))
            h.refresh_shared()
            np.testing.assert_array_equal(h.stage_layer.W, quantize_weights_kbit(h.blocks[1].W, spec))
            np.testing.assert_array_equal(h.stage_layer.b, quantize_weights_kbit(h.blocks[1].b, spec))


class TestPrefixCache:
    def test_matches_direct_simulation(self):
        net, x, _ = trained_mlp()
        h = advance(HybridNet(net, 8), x[:100], 3)
        cache = PrefixCache(h, x[:50])
        idx = np.array([0, 7, 8, 49])
        np.testing.assert_array_equal(cache.get(idx).spikes, h.prefix_spikes(x[idx]).spikes)

    def test_over_budget_recomputes(self):
        net, x, _ = trained_mlp()
        h = advance(HybridNet(net, 8), x[:100], 3)
        cache = PrefixCache(h, x[:50], budget_bytes=10)
        assert cache.packed is None
        idx = np.arange(5)
        np.testing.assert_array_equal(cache.get(idx).spikes, h.prefix_spikes(x[idx]).spikes)

    def test_no_prefix_at_stage_one(self):
        net, x, _ = trained_mlp()
        assert PrefixCache(advance(HybridNet(net, 8), x[:100], 1), x[:10]).get(np.arange(3)) is None


# --------------------------------------------------------------------- training loop


@pytest.fixture(scope="module")
def mnist_small():
    from ptlsnn.harness.data import default_mnist_dir, load_mnist_dir

    d = load_mnist_dir(default_mnist_dir())
    x, y = d["train"]
    x = x.reshape(len(x), -1)[:1500]
    y = y[:1500]
    net = AnalogNet.from_architecture("784-64-32-10", seed=0)
    train_analog(net, x[:1200], y[:1200], epochs=4, batch_size=64, seed=0)
    return net, x[:1200], y[:1200], x[1200:], y[1200:]


class TestPTLTrain:
    def run(self, mnist_small, tmp_path=None, **kw):
        net, x, y, xv, yv = mnist_small
        args = dict(n_steps=8, patience=1, stage_epoch_cap=3, epoch_budget=30, batch_size=128, seed=0)
        args.update(kw)
        frozen = []

        def on_record(rec):
            frozen.append(rec)

        log_path = tmp_path / "stage_log.jsonl" if tmp_path is not None else None
        res = ptl_train(net, x, y, xv, yv, args.pop("n_steps"), args.pop("patience"), log_path=log_path, on_record=on_record, **args)
        return res, frozen, log_path

    def test_stages_log_and_improvement(self, mnist_small, tmp_path):
        net, x, y, xv, yv = mnist_small
        res, records, log_path = self.run(mnist_small, tmp_path)
        stages = sorted({r["stage"] for r in records})
        assert stages == [1, 2, 3]
        # patience 1 still trains every stage
        assert all(stage_summary(records)[s]["epochs"] >= 1 for s in stages)
        lines = [json.loads(l) for l in log_path.read_text().splitlines()]
        assert lines == records
        assert set(lines[0]) >= {"stage", "epoch", "train_loss", "val_loss", "val_metric", "patience_t"}
        prim, _ = primitive_convert(fold_network(net), 8, 99.9, x[:512])
        acc = lambda m: evaluate_metrics("accuracy", m.forward(xv), yv)
        assert acc(res.snn) >= acc(prim)

    def test_input_net_unmodified(self, mnist_small):
        net = mnist_small[0]
        before = {k: v.copy() for k, v in net.state_arrays().items()}
        self.run(mnist_small, stage_epoch_cap=1)
        for k, v in net.state_arrays().items():
            np.testing.assert_array_equal(v, before[k])

    def test_deterministic(self, mnist_small):
        a, ra, _ = self.run(mnist_small, stage_epoch_cap=1)
        b, rb, _ = self.run(mnist_small, stage_epoch_cap=1)
        assert ra == rb
        for la, lb in zip(a.snn.layers, b.snn.layers):
            np.testing.assert_array_equal(la.W, lb.W)

    def test_readout_stage_starts_where_previous_ended(self, mnist_small):
        _, records, _ = self.run(mnist_small, patience=2)
        s2 = [r for r in records if r["stage"] == 2 and r["epoch"] > 0]
        s3_start = next(r for r in records if r["stage"] == 3 and r["epoch"] == 0)
        assert s3_start["val_loss"] == pytest.approx(min(r["val_loss"] for r in s2), rel=1e-6)

    def test_frozen_layers_bitwise_stable(self, mnist_small):
        net, x, y, xv, yv = mnist_small
        snaps = {}
        holder = {}

        def on_record(rec):
            h = holder.get("h")
            if h is None:
                return
            for l in range(1, h.stage):
                key = l
                cur = h.blocks[l - 1].W.tobytes() + h.blocks[l - 1].b.tobytes()
                assert snaps.setdefault(key, cur) == cur

        import ptlsnn.tandem as tandem

        orig = tandem.HybridNet

        class Spy(orig):
            def __init__(self, *a, **k):
                super().__init__(*a, **k)
                holder["h"] = self

        tandem.HybridNet = Spy
        try:
            ptl_train(net, x, y, xv, yv, 8, 1, stage_epoch_cap=2, on_record=on_record)
        finally:
            tandem.HybridNet = orig
        assert set(snaps) == {1, 2}

    def test_budget_exhaustion(self, mnist_small):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res, records, _ = self.run(mnist_small, patience=5, stage_epoch_cap=10, epoch_budget=2)
        assert any(issubclass(w.category, BudgetExhaustedWarning) for w in caught)
        assert res.epochs_used == 2
        assert sorted({r["stage"] for r in records}) == [1, 2, 3]
        assert res.hybrid.completed

    def test_epoch_cap(self, mnist_small):
        _, records, _ = self.run(mnist_small, patience=50, stage_epoch_cap=2)
        assert max(r["epoch"] for r in records) == 2

    def test_quantized_snn_on_grid(self, mnist_small):
        spec = WeightQuantSpec(4)
        res, _, _ = self.run(mnist_small, stage_epoch_cap=1, quant=spec)
        for sl in res.snn.layers:
            levels = sl.W / spec.scale_for(sl.layer.W)
            np.testing.assert_allclose(levels, np.rint(levels), atol=1e-4)
