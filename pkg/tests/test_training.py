"""Quantization-aware training loop: gradients, instrumentation, reports."""

import numpy as np
import pytest

import idkm.training as training
from idkm.data import synthetic_blobs
from idkm.errors import AdjointDivergence, ParamError, ShapeError
from idkm.gradients import GradBackend
from idkm.nn import LayerSpec, Network, loss_and_grad
from idkm.pq import Codebook
from idkm.solver import InitStrategy
from idkm.training import (
    TrainConfig,
    TrainState,
    bits_per_weight,
    evaluate,
    quantize_weights,
    quantized_train_step,
    solve_codebooks,
    train,
    train_float,
)

REPORT_FIELDS = {
    "epoch", "step", "loss", "top1_hard", "top1_soft", "backend", "k", "d",
    "tau", "cluster_iters", "residual", "retained_iterates", "t_forward_s",
    "t_backward_s",
}


def blob_task(seed=0, points=40):
    data = synthetic_blobs(seed, classes=4, points_per_class=points, dim=8,
                           separation=6.0)
    net = Network(layers=(
        LayerSpec(kind="dense", in_features=8, out_features=12, quantize=True),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dense", in_features=12, out_features=4, quantize=True),
    ))
    return net, net.init_weights(seed), data


def small_cfg(**kw):
    base = dict(
        k=4, d=1, tau=0.01, eps=1e-8, max_cluster_iters=200,
        learning_rate=0.05, epochs=1, batch_size=32,
        init=InitStrategy(seed=0), seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestBitsPerWeight:
    def test_frozen_values(self):
        assert bits_per_weight(8, 1) == 3.0
        assert bits_per_weight(2, 2) == 0.5
        assert bits_per_weight(4, 1) == 2.0

    def test_validation(self):
        with pytest.raises(ParamError):
            bits_per_weight(0, 1)
        with pytest.raises(ParamError):
            bits_per_weight(4, 0)


class TestTrainConfig:
    def test_zero_epochs_allowed_negative_rejected(self):
        assert small_cfg(epochs=0).epochs == 0
        with pytest.raises(ParamError):
            small_cfg(epochs=-1)

    def test_rejects_bad_hyperparameters(self):
        with pytest.raises(ParamError):
            small_cfg(learning_rate=0.0)
        with pytest.raises(ParamError):
            small_cfg(tau=0.0)
        with pytest.raises(ParamError):
            small_cfg(k=0)
        with pytest.raises(ParamError):
            small_cfg(batch_size=0)
        with pytest.raises(ParamError):
            small_cfg(loss_kind="hinge")

    def test_per_layer_overrides(self):
        cfg = small_cfg(per_layer={"layer0.w": (2, 2)})
        assert cfg.layer_kd("layer0.w") == (2, 2)
        assert cfg.layer_kd("layer2.w") == (4, 1)


class TestQuantizedStep:
    def test_unmarked_layers_get_plain_sgd(self):
        net = Network(layers=(
            LayerSpec(kind="dense", in_features=8, out_features=4),
        ))
        weights = net.init_weights(1)
        _, _, data = blob_task(1)
        x, y = data.inputs[:16], data.labels[:16]
        cfg = small_cfg()
        _, grads = loss_and_grad(net, weights, x, y, cfg.loss_kind)
        new_weights, metrics = quantized_train_step(
            net, x, y, TrainState(weights=dict(weights)), cfg
        )
        for name in weights:
            np.testing.assert_array_equal(
                new_weights[name],
                weights[name] - cfg.learning_rate * grads[name],
            )
        assert metrics.retained_iterate_count == 0
        assert metrics.per_layer == {}

    def test_lossless_when_weights_are_already_clustered(self):
        # Weights drawn from exactly k values cluster onto themselves, so the
        # quantized forward pass reproduces the float loss.
        net, _, data = blob_task(2)
        rng = np.random.default_rng(2)
        weights = {
            name: rng.choice([-0.5, 0.5], size=shape)
            for name, shape in net.param_shapes().items()
        }
        x, y = data.inputs[:16], data.labels[:16]
        cfg = small_cfg(k=2, tau=1e-6)
        float_loss, _ = loss_and_grad(net, weights, x, y, cfg.loss_kind)
        _, metrics = quantized_train_step(
            net, x, y, TrainState(weights=dict(weights)), cfg
        )
        assert metrics.loss == pytest.approx(float_loss, abs=1e-6)

    def test_backends_agree_after_one_step(self):
        net, weights, data = blob_task(3)
        x, y = data.inputs[:32], data.labels[:32]
        updates = {}
        for kind in ("unrolled", "implicit", "jfb"):
            cfg = small_cfg(
                eps=1e-11, max_cluster_iters=5000,
                backend=GradBackend(kind=kind, max_adjoint_iters=4000),
            )
            new_weights, _ = quantized_train_step(
                net, x, y, TrainState(weights=dict(weights)), cfg
            )
            updates[kind] = np.concatenate(
                [(new_weights[n] - weights[n]).ravel() for n in sorted(weights)]
            )
        ref = np.linalg.norm(updates["unrolled"])
        assert np.linalg.norm(updates["implicit"] - updates["unrolled"]) / ref <= 1e-3
        # jfb drops the inverse factor, so it only tracks the direction
        cos = updates["jfb"] @ updates["unrolled"] / (
            np.linalg.norm(updates["jfb"]) * ref
        )
        assert cos > 0.99

    def test_retained_iterates_one_shot_vs_unrolled(self):
        net, weights, data = blob_task(4)
        x, y = data.inputs[:16], data.labels[:16]
        for kind in ("implicit", "jfb"):
            _, metrics = quantized_train_step(
                net, x, y, TrainState(weights=dict(weights)),
                small_cfg(backend=GradBackend(kind=kind)),
            )
            assert metrics.retained_iterate_count == 1
        forced_t = 4
        _, metrics = quantized_train_step(
            net, x, y, TrainState(weights=dict(weights)),
            small_cfg(backend=GradBackend(kind="unrolled"), eps=1e-300,
                      max_cluster_iters=forced_t),
        )
        assert metrics.cluster_iters == forced_t
        assert metrics.retained_iterate_count == forced_t

    def test_record_trace_flag_exposes_the_memory_cost(self):
        # Tracing with a one-shot backend is a diagnostic: the counter must
        # report what was actually held, not what the backend needed.
        net, weights, data = blob_task(4)
        x, y = data.inputs[:16], data.labels[:16]
        _, metrics = quantized_train_step(
            net, x, y, TrainState(weights=dict(weights)),
            small_cfg(record_trace=True),
        )
        assert metrics.retained_iterate_count == metrics.cluster_iters > 1

    def test_both_gradient_paths_are_live(self):
        net, weights, data = blob_task(5)
        x, y = data.inputs[:16], data.labels[:16]

        def step(**kw):
            out, _ = quantized_train_step(
                net, x, y, TrainState(weights=dict(weights)), small_cfg(**kw)
            )
            return np.concatenate([out[n].ravel() for n in sorted(out)])

        full = step()
        no_cluster = step(cluster_path=False)
        no_direct = step(direct_path=False)
        assert not np.array_equal(full, no_cluster)
        assert not np.array_equal(full, no_direct)

    def test_warm_start_reuses_the_previous_codebook(self):
        net, weights, data = blob_task(6)
        x, y = data.inputs[:16], data.labels[:16]
        state = TrainState(weights=dict(weights))
        cfg = small_cfg()
        state.weights, first = quantized_train_step(net, x, y, state, cfg)
        assert set(state.codebooks) == set(net.quantized_keys())
        books = {k: v.data.copy() for k, v in state.codebooks.items()}
        cold_state = TrainState(weights=dict(state.weights))
        _, warm = quantized_train_step(net, x, y, state, cfg)
        _, cold = quantized_train_step(net, x, y, cold_state, cfg)
        # starting from the previous fixed point beats reseeding kmeans++
        assert warm.cluster_iters < cold.cluster_iters
        refreshed = [not np.array_equal(books[k], state.codebooks[k].data)
                     for k in books]
        assert all(refreshed)

    def test_divergence_surfaces_the_layer_name(self, monkeypatch):
        real = training.vjp_dC_dW

        def flaky(upstream, w, c_star, tau, backend):
            if backend.kind == "implicit":
                raise AdjointDivergence("synthetic failure")
            return real(upstream, w, c_star, tau, backend)

        monkeypatch.setattr(training, "vjp_dC_dW", flaky)
        net, weights, data = blob_task(7)
        x, y = data.inputs[:16], data.labels[:16]
        with pytest.raises(AdjointDivergence, match="layer0.w"):
            quantized_train_step(
                net, x, y, TrainState(weights=dict(weights)), small_cfg()
            )

    def test_divergence_falls_back_to_jfb_when_asked(self, monkeypatch):
        real = training.vjp_dC_dW

        def flaky(upstream, w, c_star, tau, backend):
            if backend.kind == "implicit":
                raise AdjointDivergence("synthetic failure")
            return real(upstream, w, c_star, tau, backend)

        monkeypatch.setattr(training, "vjp_dC_dW", flaky)
        net, weights, data = blob_task(7)
        x, y = data.inputs[:16], data.labels[:16]
        _, metrics = quantized_train_step(
            net, x, y, TrainState(weights=dict(weights)),
            small_cfg(fallback_jfb=True),
        )
        assert all(s["fallback"] for s in metrics.per_layer.values())


class TestQuantizeAndEvaluate:
    def test_hard_quantization_snaps_to_codewords(self):
        net, weights, _ = blob_task(8)
        cfg = small_cfg()
        books = solve_codebooks(net, weights, cfg)
        assert set(books) == set(net.quantized_keys())
        hard = quantize_weights(net, weights, books, mode="hard")
        for key in net.quantized_keys():
            values = set(np.round(books[key].data.ravel(), 12))
            assert set(np.round(hard[key].ravel(), 12)) <= values
        # biases pass through untouched
        np.testing.assert_array_equal(hard["layer0.b"], weights["layer0.b"])

    def test_quantize_weights_validation(self):
        net, weights, _ = blob_task(8)
        books = solve_codebooks(net, weights, small_cfg())
        with pytest.raises(ParamError):
            quantize_weights(net, weights, books, mode="soft")
        with pytest.raises(ParamError):
            quantize_weights(net, weights, books, mode="binary")
        with pytest.raises(ShapeError):
            quantize_weights(net, weights, {}, mode="hard")

    def test_constant_predictor_scores_perfectly(self):
        net = Network(layers=(
            LayerSpec(kind="dense", in_features=2, out_features=3),
        ))
        weights = {"layer0.w": np.zeros((3, 2)),
                   "layer0.b": np.array([1.0, 0.0, 0.0])}
        data = synthetic_blobs(0, classes=1, points_per_class=20, dim=2,
                               separation=0.0)
        assert evaluate(net, weights, data) == 1.0

    def test_eval_modes(self):
        net, weights, data = blob_task(9)
        books = solve_codebooks(net, weights, small_cfg())
        acc_float = evaluate(net, weights, data)
        acc_hard = evaluate(net, weights, data, books, mode="hard")
        assert 0.0 <= acc_float <= 1.0 and 0.0 <= acc_hard <= 1.0
        with pytest.raises(ParamError):
            evaluate(net, weights, data, books, mode="soft")
        with pytest.raises(ParamError):
            evaluate(net, weights, data, mode="hard")


def _strip_timings(record):
    return {k: v for k, v in record.items()
            if k not in ("t_forward_s", "t_backward_s")}


class TestTrainLoop:
    def test_epoch_records_carry_the_full_field_set(self):
        net, weights, data = blob_task(10, points=10)
        history, _ = train(net, weights, small_cfg(epochs=1), data)
        assert len(history) == 2
        for record in history:
            assert set(record) == REPORT_FIELDS

    def test_zero_epochs_is_pure_evaluation(self):
        net, weights, data = blob_task(10, points=10)
        history, state = train(net, weights, small_cfg(epochs=0), data)
        assert len(history) == 1
        assert history[0]["loss"] is None
        assert history[0]["epoch"] == 0
        for name in weights:
            np.testing.assert_array_equal(state.weights[name], weights[name])

    def test_histories_are_deterministic(self):
        net, weights, data = blob_task(11, points=10)
        first, _ = train(net, weights, small_cfg(epochs=2), data)
        second, _ = train(net, weights, small_cfg(epochs=2), data)
        assert ([_strip_timings(r) for r in first]
                == [_strip_timings(r) for r in second])

    def test_loss_goes_down_on_blobs(self):
        net, weights, data = blob_task(12)
        history, _ = train(net, weights, small_cfg(epochs=3), data)
        assert history[-1]["loss"] < history[1]["loss"]
        assert history[-1]["top1_hard"] >= history[0]["top1_hard"] - 0.05

    def test_float_pretraining_reaches_the_blobs_ceiling(self):
        net, weights, data = blob_task(13, points=100)
        history, trained = train_float(
            net, weights, data, learning_rate=0.1, epochs=10, batch_size=32
        )
        assert history[-1]["top1"] >= 0.95
        assert evaluate(net, trained, data) >= 0.95

    def test_train_float_validates_hyperparameters(self):
        net, weights, data = blob_task(13, points=5)
        with pytest.raises(ParamError):
            train_float(net, weights, data, learning_rate=0.0)
