"""Initialization, the alternating loop's contracts, and evaluation."""

import numpy as np
import pytest

from heteroadapt.data import SynthSpec, synthetic_task
from heteroadapt.errors import ConfigError
from heteroadapt.model import (
    ClassifierParams,
    DiscriminatorParams,
    ModelParams,
    TransformerParams,
    d_parameters,
    fg_parameters,
)
from heteroadapt.numerics import Adam, Tensor
from heteroadapt.training import (
    TrainConfig,
    batch_from_task,
    evaluate_accuracy,
    init_params,
    iteration_state,
    predict_classes,
    train,
    train_step,
)


def tiny_config(**overrides):
    base = dict(d_c=8, hidden=8, iterations=20, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def tiny_task(seed=0, **spec_overrides):
    spec = dict(
        source_dims=(12, 14),
        target_dim=16,
        classes=3,
        latent_dim=6,
        samples_per_class=15,
        target_labeled_per_class=2,
        target_unlabeled=45,
        seed=seed,
    )
    spec.update(spec_overrides)
    return synthetic_task(SynthSpec(**spec))


class TestConfig:
    def test_defaults_match_recommended_settings(self):
        cfg = TrainConfig()
        assert (cfg.beta, cfg.tau, cfg.d_c) == (0.03, 0.004, 256)
        assert (cfg.lr_fg, cfg.lr_d) == (0.004, 0.001)
        assert cfg.lg_norm == "l1" and cfg.weighting == "conditional"

    def test_invalid_values_rejected(self):
        for bad in (
            dict(beta=-0.1),
            dict(tau=-1.0),
            dict(d_c=0),
            dict(lr_fg=0.0),
            dict(iterations=-1),
            dict(lg_norm="l3"),
            dict(weighting="softmax"),
            dict(eval_stride=0),
        ):
            with pytest.raises(ConfigError):
                TrainConfig(**bad).validate()


class TestInit:
    def test_same_seed_bit_identical(self):
        task = tiny_task()
        a = init_params(task, tiny_config())
        b = init_params(task, tiny_config())
        for ta, tb in zip(fg_parameters(a) + d_parameters(a), fg_parameters(b) + d_parameters(b)):
            assert np.array_equal(ta.array, tb.array)

    def test_different_seeds_differ(self):
        task = tiny_task()
        a = init_params(task, tiny_config(seed=0))
        b = init_params(task, tiny_config(seed=1))
        assert not np.array_equal(a.target.w1.array, b.target.w1.array)

    def test_biases_start_at_zero(self):
        params = init_params(tiny_task(), tiny_config())
        for t in (*params.sources, params.target):
            assert np.all(t.b1.array == 0.0) and np.all(t.b2.array == 0.0)
        assert np.all(params.classifier.b.array == 0.0)
        assert np.all(params.discriminator.b1.array == 0.0)

    def test_weight_scale_follows_fan_in(self):
        params = init_params(tiny_task(), tiny_config())
        bound = 1.0 / np.sqrt(params.target.w1.shape[0])
        w = params.target.w1.array
        assert np.all(np.abs(w) <= bound)
        assert w.std() > 0.1 * bound

    def test_tied_config_builds_shared_second_layer(self):
        params = init_params(tiny_task(), tiny_config(lg_norm="tied"))
        assert params.tied_second
        assert params.sources[0].w2 is params.target.w2


class TestTrainStep:
    def test_discriminator_step_freezes_fg_and_vice_versa(self):
        task = tiny_task()
        config = tiny_config()
        params = init_params(task, config)
        batch = batch_from_task(task)
        opt_fg = Adam(fg_parameters(params), config.lr_fg)
        opt_d = Adam(d_parameters(params), config.lr_d)

        soft, deltas, weights, emb = iteration_state(params, batch, config)
        from heteroadapt.model import build_discriminator_objective, replace_d

        d_tape, d_loss = build_discriminator_objective(
            params, batch, weights, slope=config.leaky_slope, embedding_values=emb
        )
        after_d = replace_d(params, opt_d.step(d_parameters(params), d_tape.backward(d_loss)))
        for ta, tb in zip(fg_parameters(params), fg_parameters(after_d)):
            assert ta is tb  # f,g untouched by the discriminator step

        new_params, _, _, _ = train_step(after_d, opt_fg, Adam(d_parameters(after_d), 0.001),
                                         batch, config)
        # one more full step: fg moved, and within it d stayed what opt_d produced
        assert not np.array_equal(new_params.target.w1.array, after_d.target.w1.array)

    def test_conditional_weights_in_range(self):
        task = tiny_task()
        config = tiny_config(iterations=10)
        trace = train(task, config)
        for rec in trace.records:
            w = np.array(rec.weights)
            assert np.all(w >= 0.5) and np.all(w < 1.0)
            assert np.array_equal(
                np.argsort(w), np.argsort(np.array(rec.deltas))[::-1]
            )

    def test_supervised_reduction_learns_separable_task(self):
        task = tiny_task(spread=0.2)
        config = tiny_config(beta=0.0, weighting="ones", lg_norm="off", iterations=50)
        trace = train(task, config)
        first, last = trace.records[0].loss_fg, trace.records[-1].loss_fg
        assert last < first

    def test_ones_weighting_reports_unit_weights(self):
        trace = train(tiny_task(), tiny_config(weighting="ones", iterations=3))
        for rec in trace.records:
            assert rec.weights == (1.0, 1.0)
            assert len(rec.deltas) == 2  # divergences still recorded

    def test_recorded_divergences_match_objective_tape_bitwise(self):
        # the weighting pass and the transformer objective must run the
        # same op sequence, so their divergence values agree exactly
        from heteroadapt.model import build_transformer_objective, soft_labels

        task = tiny_task()
        config = tiny_config()
        params = init_params(task, config)
        batch = batch_from_task(task)
        soft, deltas, weights, _ = iteration_state(params, batch, config)
        obj = build_transformer_objective(
            params, batch, beta=config.beta, tau=config.tau,
            lg_norm=config.lg_norm, weighting=config.weighting,
            slope=config.leaky_slope, soft=soft,
        )
        tape_deltas = np.array([float(d.value) for d in obj.deltas])
        tape_weights = np.array([float(w.value) for w in obj.weights])
        assert np.array_equal(deltas, tape_deltas)
        assert np.array_equal(weights, tape_weights)
        np.testing.assert_array_equal(
            soft, soft_labels(params, batch.target_unlabeled_x, config.leaky_slope)
        )


class TestTrain:
    def test_zero_iterations_returns_init(self):
        task = tiny_task()
        config = tiny_config(iterations=0)
        trace = train(task, config)
        assert trace.records == []
        expected = init_params(task, config)
        for ta, tb in zip(fg_parameters(trace.final_params), fg_parameters(expected)):
            assert np.array_equal(ta.array, tb.array)

    def test_fixed_seed_bit_identical_trace(self):
        task = tiny_task()
        a = train(task, tiny_config(iterations=5))
        b = train(task, tiny_config(iterations=5))
        assert a.records == b.records
        for ta, tb in zip(fg_parameters(a.final_params), fg_parameters(b.final_params)):
            assert np.array_equal(ta.array, tb.array)

    def test_record_count_and_eval_stride(self):
        task = tiny_task()
        trace = train(task, tiny_config(iterations=7, eval_stride=3))
        assert len(trace.records) == 7
        accs = [r.target_accuracy for r in trace.records]
        assert accs[0] == accs[1] == accs[2]  # evaluated at 0, carried to 1-2
        assert trace.records[-1].iteration == 6

    def test_requires_sources(self):
        task = tiny_task()
        bare = type(task)((), task.target_labeled, task.target_unlabeled, task.eval_labels)
        with pytest.raises(ConfigError, match="source"):
            train(bare, tiny_config())


class TestEvaluate:
    def _fixed_params(self):
        # identity pipeline: 1-d embedding, logits [h, -h]; class 0 iff h >= 0
        ident = TransformerParams(Tensor([[1.0]]), Tensor([0.0]), Tensor([[1.0]]), Tensor([0.0]))
        return ModelParams(
            (ident,), ident,
            ClassifierParams(Tensor([[1.0, -1.0]]), Tensor([0.0, 0.0])),
            DiscriminatorParams(Tensor([[1.0]]), Tensor([0.0]),
                                Tensor([[1.0, 0.0]]), Tensor([0.0, 0.0])),
        )

    def test_all_correct_and_all_wrong(self):
        params = self._fixed_params()
        x = [[1.0], [2.0], [3.0]]
        assert evaluate_accuracy(params, x, [0, 0, 0]) == 1.0
        assert evaluate_accuracy(params, x, [1, 1, 1]) == 0.0

    def test_three_of_four(self):
        params = self._fixed_params()
        x = [[1.0], [1.0], [1.0], [-1.0]]
        assert evaluate_accuracy(params, x, [0, 0, 0, 0]) == 0.75

    def test_tie_breaks_to_lowest_class(self):
        params = self._fixed_params()
        # h = 0 gives logits [0, 0]: argmax tie resolves to class 0
        assert predict_classes(params, [[0.0]], 0.01)[0] == 0

    def test_monotone_transform_invariance(self):
        params = self._fixed_params()
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 1))
        base = predict_classes(params, x, 0.01)
        # any strictly monotone transform of all class scores keeps the argmax
        from heteroadapt.model import classifier_logits

        logits = classifier_logits(params, params.target, x, 0.01)
        transformed = np.argmax(3.0 * logits + 7.0, axis=1)
        np.testing.assert_array_equal(base, transformed)

    def test_empty_evaluation_rejected(self):
        with pytest.raises(ConfigError, match="empty"):
            evaluate_accuracy(self._fixed_params(), [[1.0]], np.array([]))
