"""Alternating two-optimizer training loop with per-iteration weighting.

Each iteration: soft labels, divergences, and weights are recomputed from
the current parameters; the discriminator takes one Adam step against the
true domain labels (transformers frozen, weights constant); then the
transformers and classifier take one Adam step against the combined
objective with swapped domain labels (discriminator frozen, weights live
on the tape so gradients reach the divergences).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import MultiSourceTask
from .errors import ConfigError
from .model import (
    ClassifierParams,
    DiscriminatorParams,
    ModelParams,
    TaskBatch,
    TransformerParams,
    build_discriminator_objective,
    build_transformer_objective,
    classifier_logits,
    classify,
    d_parameters,
    divergence_nodes,
    embed_batch,
    fg_parameters,
    lift_params,
    replace_d,
    replace_fg,
    source_weights,
)
from .numerics import Adam, Tape, Tensor, softmax_values

LG_NORMS = ("l1", "l2", "off", "tied")
WEIGHTINGS = ("conditional", "ones")


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.03
    tau: float = 0.004
    d_c: int = 256
    hidden: int = 256
    lr_fg: float = 0.004
    lr_d: float = 0.001
    iterations: int = 1000
    seed: int = 0
    lg_norm: str = "l1"
    weighting: str = "conditional"
    leaky_slope: float = 0.01
    eval_stride: int = 1

    def validate(self) -> None:
        if self.beta < 0 or self.tau < 0:
            raise ConfigError("beta and tau must be non-negative")
        if self.d_c < 1 or self.hidden < 1:
            raise ConfigError("d_c and hidden must be positive")
        if self.lr_fg <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations cannot be negative")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.lg_norm not in LG_NORMS:
            raise ConfigError(f"lg_norm must be one of {LG_NORMS}, got {self.lg_norm!r}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.leaky_slope < 0:
            raise ConfigError("leaky_slope must be non-negative")
        if self.eval_stride < 1:
            raise ConfigError("eval_stride must be positive")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    loss_fg: float
    loss_lg: float
    loss_dg_inverted: float
    loss_d: float
    deltas: tuple[float, ...]
    weights: tuple[float, ...]
    source_accuracy: tuple[float, ...]
    target_accuracy: float


@dataclass
class TrainTrace:
    records: list[IterationRecord] = field(default_factory=list)
    final_params: ModelParams | None = None

    @property
    def final_accuracy(self) -> float:
        if not self.records:
            raise ConfigError("trace has no records")
        return self.records[-1].target_accuracy


# -- initialization ---------------------------------------------------------


def _affine_init(rng, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out))), Tensor(np.zeros(fan_out))


def init_params(task: MultiSourceTask, config: TrainConfig) -> ModelParams:
    """Seeded uniform init scaled by 1/sqrt(fan_in); biases start at zero."""
    rng = np.random.default_rng(config.seed)
    tied = config.lg_norm == "tied"
    h, d_c = config.hidden, config.d_c
    firsts = [_affine_init(rng, s.dim, h) for s in task.sources]
    seconds = None if tied else [_affine_init(rng, h, d_c) for _ in task.sources]
    tw1, tb1 = _affine_init(rng, task.target_labeled.dim, h)
    tw2, tb2 = _affine_init(rng, h, d_c)
    target = TransformerParams(tw1, tb1, tw2, tb2)
    if tied:
        sources = tuple(TransformerParams(w1, b1, tw2, tb2) for (w1, b1) in firsts)
    else:
        sources = tuple(
            TransformerParams(w1, b1, w2, b2)
            for (w1, b1), (w2, b2) in zip(firsts, seconds)
        )
    classifier = ClassifierParams(*_affine_init(rng, d_c, task.num_classes))
    dw1, db1 = _affine_init(rng, d_c, d_c)
    dw2, db2 = _affine_init(rng, d_c, 2)
    return ModelParams(sources, target, classifier, DiscriminatorParams(dw1, db1, dw2, db2), tied)


def batch_from_task(task: MultiSourceTask) -> TaskBatch:
    return TaskBatch(
        tuple(s.features for s in task.sources),
        tuple(s.labels for s in task.sources),
        task.target_labeled.features,
        task.target_labeled.labels,
        task.target_unlabeled.features,
        task.num_classes,
    )


# -- evaluation ----------------------------------------------------------------


def predict_classes(params: ModelParams, features, slope: float,
                    transformer: TransformerParams | None = None) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    t = params.target if transformer is None else transformer
    return np.argmax(classifier_logits(params, t, features, slope), axis=1)


def evaluate_accuracy(params: ModelParams, features, labels, slope: float = 0.01,
                      transformer: TransformerParams | None = None) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigError("evaluation set is empty")
    predicted = predict_classes(params, features, slope, transformer)
    return float(np.mean(predicted == labels))


def _accuracies(params: ModelParams, task: MultiSourceTask, slope: float):
    source_acc = tuple(
        evaluate_accuracy(params, s.features, s.labels, slope, params.sources[k])
        for k, s in enumerate(task.sources)
    )
    target_acc = evaluate_accuracy(
        params, task.target_unlabeled.features, task.eval_labels, slope
    )
    return source_acc, target_acc


# -- one iteration ----------------------------------------------------------------


def iteration_state(params: ModelParams, batch: TaskBatch, config: TrainConfig):
    """Soft labels, divergences, weights, and embedding values, one forward pass.

    The same op sequence later rebuilds the divergences on the training
    tape, so recorded values match the optimized ones bit for bit.
    """
    tape = Tape()
    model = lift_params(tape, params, train_fg=False, train_d=False)
    emb = embed_batch(model, tape, batch, config.leaky_slope)
    soft = None
    if batch.target_unlabeled_x is not None:
        soft = softmax_values(classify(model, emb.target_unlabeled).value)
    if batch.num_sources >= 1:
        deltas = np.array([float(d.value) for d in divergence_nodes(emb, batch, soft)])
    else:
        deltas = np.zeros(0)
    if config.weighting == "conditional" and batch.num_sources >= 1:
        weights = np.array(source_weights(deltas).weights)
    else:
        weights = np.ones(batch.num_sources)
    emb_values = (
        [e.value for e in emb.sources],
        emb.target_labeled.value,
        None if emb.target_unlabeled is None else emb.target_unlabeled.value,
    )
    return soft, deltas, weights, emb_values


def train_step(params: ModelParams, opt_fg: Adam, opt_d: Adam,
               batch: TaskBatch, config: TrainConfig):
    """One alternation: discriminator step, then transformer/classifier step.

    Returns the updated parameters and the loss/weighting scalars recorded
    for the trace.
    """
    soft, deltas, weights, emb_values = iteration_state(params, batch, config)

    d_tape, d_loss = build_discriminator_objective(
        params, batch, weights, slope=config.leaky_slope, embedding_values=emb_values
    )
    loss_d = float(d_loss.value)
    params = replace_d(params, opt_d.step(d_parameters(params), d_tape.backward(d_loss)))

    obj = build_transformer_objective(
        params, batch,
        beta=config.beta, tau=config.tau, lg_norm=config.lg_norm,
        weighting=config.weighting, slope=config.leaky_slope, soft=soft,
    )
    fg_grads = obj.tape.backward(obj.objective)
    params = replace_fg(params, opt_fg.step(fg_parameters(params), fg_grads))

    loss_fg = float(obj.classification.value)
    loss_lg = 0.0 if obj.consistency is None else float(obj.consistency.value)
    loss_dg_inv = float(obj.inverted_domain.value)
    return params, (loss_fg, loss_lg, loss_dg_inv, loss_d), deltas, weights


# -- full runs ----------------------------------------------------------------------


def validate_task(task: MultiSourceTask, require_sources: bool = True) -> None:
    if require_sources and task.num_sources < 1:
        raise ConfigError("training needs at least one source domain")
    if task.eval_labels is None:
        raise ConfigError("target unlabeled split carries no held-out labels to evaluate")


def train(task: MultiSourceTask, config: TrainConfig,
          params: ModelParams | None = None) -> TrainTrace:
    """Run full-batch alternating training and record every iteration.

    Identical (task, config, params) inputs produce bit-identical traces.
    """
    config.validate()
    validate_task(task)
    batch = batch_from_task(task)
    if params is None:
        params = init_params(task, config)
    opt_fg = Adam(fg_parameters(params), config.lr_fg)
    opt_d = Adam(d_parameters(params), config.lr_d)
    trace = TrainTrace()
    source_acc: tuple[float, ...] = tuple(0.0 for _ in task.sources)
    target_acc = 0.0
    for it in range(config.iterations):
        params, losses, deltas, weights = train_step(params, opt_fg, opt_d, batch, config)
        if it % config.eval_stride == 0 or it == config.iterations - 1:
            source_acc, target_acc = _accuracies(params, task, config.leaky_slope)
        trace.records.append(
            IterationRecord(
                it, *losses,
                tuple(float(d) for d in deltas),
                tuple(float(w) for w in weights),
                source_acc, target_acc,
            )
        )
    trace.final_params = params
    return trace
