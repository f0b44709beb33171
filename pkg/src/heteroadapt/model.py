"""Network architecture and losses for multisource heterogeneous adaptation.

Every domain gets its own two-layer feature transformer into a shared
subspace of width `d_c`; the second layers are shape-identical across
domains so their parameters can be compared (and optionally tied). On top
of the shared subspace sit a linear label classifier and a small
source-vs-target discriminator. Source importance comes from a
class-conditional divergence between each source and the target, squashed
through an averaged sigmoid so weights stay inside [0.5, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import (
    Node,
    Tape,
    Tensor,
    leaky_relu,
    matmul_affine,
    relu,
    sigmoid,
    sigmoid_values,
    softmax_cross_entropy,
    softmax_values,
    squared_error,
    sum_abs,
    sum_sq,
    weighted_row_sum,
)

# Largest double below 1; the logistic curve saturates to exactly 1.0 in
# float64 past ~36.7, which would push weights onto the closed boundary.
_SIGMOID_CEILING = float(np.nextafter(1.0, 0.0))

SOURCE_DOMAIN_LABEL = np.array([1.0, 0.0])
TARGET_DOMAIN_LABEL = np.array([0.0, 1.0])


def domain_label_rows(n: int, is_target: bool, inverted: bool) -> np.ndarray:
    """(n, 2) one-hot domain labels; `inverted` swaps the two components."""
    base = TARGET_DOMAIN_LABEL if is_target else SOURCE_DOMAIN_LABEL
    if inverted:
        base = base[::-1]
    return np.tile(base, (n, 1))


# -- parameter containers ----------------------------------------------------


@dataclass(frozen=True)
class TransformerParams:
    """Two-layer map d_in -> hidden -> d_c (weights (in, out), bias (out,))."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        if self.w1.shape[1] != self.b1.shape[0] or self.w2.shape[1] != self.b2.shape[0]:
            raise ShapeError("transformer bias widths do not match their weights")
        if self.w1.shape[1] != self.w2.shape[0]:
            raise ShapeError(
                f"transformer layers do not chain: {self.w1.shape} then {self.w2.shape}"
            )

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]


@dataclass(frozen=True)
class ClassifierParams:
    """Single affine map d_c -> C; softmax only happens inside losses."""

    w: Tensor
    b: Tensor


@dataclass(frozen=True)
class DiscriminatorParams:
    """Two-layer source-vs-target head: relu hidden layer, linear 2-way output."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        if self.w2.shape[1] != 2:
            raise ShapeError(f"discriminator must output 2 domain scores, got {self.w2.shape}")


@dataclass(frozen=True)
class ModelParams:
    """All learnable state: per-source and target transformers, classifier,
    discriminator. `tied_second` marks that every transformer shares one
    physical second-layer block (the target's)."""

    sources: tuple[TransformerParams, ...]
    target: TransformerParams
    classifier: ClassifierParams
    discriminator: DiscriminatorParams
    tied_second: bool = False

    def __post_init__(self):
        second = (self.target.w2.shape, self.target.b2.shape)
        for k, t in enumerate(self.sources):
            if (t.w2.shape, t.b2.shape) != second:
                raise ShapeError(
                    f"source {k} second layer {t.w2.shape} differs from target {second[0]}"
                )
        d_c = self.target.d_out
        if self.classifier.w.shape[0] != d_c:
            raise ShapeError(
                f"classifier input {self.classifier.w.shape[0]} != subspace width {d_c}"
            )
        if self.discriminator.w1.shape[0] != d_c:
            raise ShapeError(
                f"discriminator input {self.discriminator.w1.shape[0]} != subspace width {d_c}"
            )

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    @property
    def d_c(self) -> int:
        return self.target.d_out


def fg_parameters(params: ModelParams) -> list[Tensor]:
    """Transformer + classifier tensors in a fixed flat order.

    With tied second layers the shared block appears exactly once (with the
    target transformer); otherwise each transformer contributes all four
    tensors.
    """
    out: list[Tensor] = []
    for t in params.sources:
        out.extend([t.w1, t.b1] if params.tied_second else [t.w1, t.b1, t.w2, t.b2])
    out.extend([params.target.w1, params.target.b1, params.target.w2, params.target.b2])
    out.extend([params.classifier.w, params.classifier.b])
    return out


def replace_fg(params: ModelParams, tensors: Sequence[Tensor]) -> ModelParams:
    """Rebuild ModelParams from a flat list in `fg_parameters` order."""
    tensors = list(tensors)
    expected = len(fg_parameters(params))
    if len(tensors) != expected:
        raise ShapeError(f"expected {expected} tensors, got {len(tensors)}")
    it = iter(tensors)
    firsts = []
    for _ in params.sources:
        if params.tied_second:
            firsts.append((next(it), next(it)))
        else:
            firsts.append((next(it), next(it), next(it), next(it)))
    tw1, tb1, tw2, tb2 = next(it), next(it), next(it), next(it)
    target = TransformerParams(tw1, tb1, tw2, tb2)
    if params.tied_second:
        sources = tuple(TransformerParams(w1, b1, tw2, tb2) for (w1, b1) in firsts)
    else:
        sources = tuple(TransformerParams(*quad) for quad in firsts)
    classifier = ClassifierParams(next(it), next(it))
    return ModelParams(sources, target, classifier, params.discriminator, params.tied_second)


def d_parameters(params: ModelParams) -> list[Tensor]:
    d = params.discriminator
    return [d.w1, d.b1, d.w2, d.b2]


def replace_d(params: ModelParams, tensors: Sequence[Tensor]) -> ModelParams:
    if len(tensors) != 4:
        raise ShapeError(f"discriminator has 4 tensors, got {len(tensors)}")
    return ModelParams(
        params.sources,
        params.target,
        params.classifier,
        DiscriminatorParams(*tensors),
        params.tied_second,
    )


# -- lifting parameters onto a tape ------------------------------------------


@dataclass
class TransformerNodes:
    w1: Node
    b1: Node
    w2: Node
    b2: Node


@dataclass
class ModelNodes:
    sources: tuple[TransformerNodes, ...]
    target: TransformerNodes
    cls_w: Node
    cls_b: Node
    disc_w1: Node
    disc_b1: Node
    disc_w2: Node
    disc_b2: Node


def lift_params(tape: Tape, params: ModelParams, *, train_fg: bool, train_d: bool) -> ModelNodes:
    """Put every parameter tensor on the tape.

    Trainable groups become `param` leaves (registered in the matching
    flat order, so `tape.backward` aligns with `fg_parameters` /
    `d_parameters`); frozen groups become constants. Tied second layers
    are lifted once and the node is shared.
    """
    lift = tape.param if train_fg else tape.constant
    firsts = []
    for t in params.sources:
        if params.tied_second:
            firsts.append((lift(t.w1), lift(t.b1)))
        else:
            firsts.append((lift(t.w1), lift(t.b1), lift(t.w2), lift(t.b2)))
    tw1, tb1 = lift(params.target.w1), lift(params.target.b1)
    tw2, tb2 = lift(params.target.w2), lift(params.target.b2)
    target = TransformerNodes(tw1, tb1, tw2, tb2)
    if params.tied_second:
        sources = tuple(TransformerNodes(w1, b1, tw2, tb2) for (w1, b1) in firsts)
    else:
        sources = tuple(TransformerNodes(*quad) for quad in firsts)
    cls_w, cls_b = lift(params.classifier.w), lift(params.classifier.b)
    lift_d = tape.param if train_d else tape.constant
    d = params.discriminator
    return ModelNodes(
        sources, target, cls_w, cls_b, lift_d(d.w1), lift_d(d.b1), lift_d(d.w2), lift_d(d.b2)
    )


# -- forward passes -----------------------------------------------------------


def transform(t: TransformerNodes, x: Node, slope: float) -> Node:
    """Two affine layers, each followed by the leaky rectifier."""
    hidden = leaky_relu(matmul_affine(x, t.w1, t.b1), slope)
    return leaky_relu(matmul_affine(hidden, t.w2, t.b2), slope)


def classify(model: ModelNodes, emb: Node) -> Node:
    return matmul_affine(emb, model.cls_w, model.cls_b)


def discriminate(model: ModelNodes, emb: Node) -> Node:
    hidden = relu(matmul_affine(emb, model.disc_w1, model.disc_b1))
    return matmul_affine(hidden, model.disc_w2, model.disc_b2)


def transform_values(t: TransformerParams, x, slope: float) -> np.ndarray:
    """Value-only forward pass through one transformer."""
    tape = Tape()
    nodes = TransformerNodes(*(tape.constant(p) for p in (t.w1, t.b1, t.w2, t.b2)))
    return transform(nodes, tape.constant(x), slope).value


def classifier_logits(params: ModelParams, t: TransformerParams, x, slope: float) -> np.ndarray:
    """Value-only logits for samples of the domain owning transformer `t`."""
    tape = Tape()
    model = lift_params(tape, params, train_fg=False, train_d=False)
    nodes = TransformerNodes(*(tape.constant(p) for p in (t.w1, t.b1, t.w2, t.b2)))
    return classify(model, transform(nodes, tape.constant(x), slope)).value


def soft_labels(params: ModelParams, x_unlabeled, slope: float) -> np.ndarray:
    """Row-wise class probabilities for unlabeled target samples."""
    return softmax_values(classifier_logits(params, params.target, x_unlabeled, slope))


# -- task batches --------------------------------------------------------------


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass(frozen=True)
class TaskBatch:
    """Raw tensors plus cached encodings for one full-batch training task."""

    source_x: tuple[Tensor, ...]
    source_labels: tuple[np.ndarray, ...]
    target_labeled_x: Tensor
    target_labeled_labels: np.ndarray
    target_unlabeled_x: Tensor | None
    num_classes: int
    source_onehot: tuple[np.ndarray, ...] = field(init=False)
    target_onehot: np.ndarray = field(init=False)

    def __post_init__(self):
        for labels, x in zip(self.source_labels, self.source_x, strict=True):
            _check_labels(labels, x.shape[0], self.num_classes)
        _check_labels(self.target_labeled_labels, self.target_labeled_x.shape[0], self.num_classes)
        object.__setattr__(
            self,
            "source_onehot",
            tuple(_one_hot(y, self.num_classes) for y in self.source_labels),
        )
        object.__setattr__(
            self, "target_onehot", _one_hot(self.target_labeled_labels, self.num_classes)
        )

    @property
    def num_sources(self) -> int:
        return len(self.source_x)

    @property
    def n_l(self) -> int:
        return self.target_labeled_x.shape[0]

    @property
    def n_u(self) -> int:
        return 0 if self.target_unlabeled_x is None else self.target_unlabeled_x.shape[0]


def _check_labels(labels: np.ndarray, n: int, num_classes: int) -> None:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not cover {n} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"labels must lie in [0, {num_classes})")


@dataclass
class TaskEmbeddings:
    sources: list[Node]
    target_labeled: Node
    target_unlabeled: Node | None


def embed_batch(model: ModelNodes, tape: Tape, batch: TaskBatch, slope: float) -> TaskEmbeddings:
    sources = [
        transform(t, tape.constant(x), slope) for t, x in zip(model.sources, batch.source_x)
    ]
    target_labeled = transform(model.target, tape.constant(batch.target_labeled_x), slope)
    target_unlabeled = None
    if batch.target_unlabeled_x is not None:
        target_unlabeled = transform(model.target, tape.constant(batch.target_unlabeled_x), slope)
    return TaskEmbeddings(sources, target_labeled, target_unlabeled)


# -- losses ---------------------------------------------------------------------


def consistency_loss(tape: Tape, model: ModelNodes, norm: str = "l1") -> Node:
    """Disagreement between each source's second layer and the target's.

    Weights and biases are concatenated per layer; `l1` sums absolute
    differences, `l2` sums squared differences.
    """
    if norm not in ("l1", "l2"):
        raise ConfigError(f"consistency norm must be 'l1' or 'l2', got {norm!r}")
    reduce = sum_abs if norm == "l1" else sum_sq
    total = tape.constant(0.0)
    for t in model.sources:
        total = total + reduce(t.w2 - model.target.w2) + reduce(t.b2 - model.target.b2)
    return total


def class_conditional_mmd(
    source_emb: Node,
    source_labels: np.ndarray,
    target_labeled_emb: Node,
    target_labels: np.ndarray,
    num_classes: int,
    target_unlabeled_emb: Node | None = None,
    unlabeled_soft_labels: np.ndarray | None = None,
    domain: str | int | None = None,
) -> Node:
    """Mean over classes of the squared distance between class means.

    The target mean for class c blends the labeled samples of that class
    with every unlabeled sample weighted by its soft-label probability for
    c; the blend is normalized by labeled count plus total soft mass. Soft
    labels are treated as constants: gradients flow only through the
    embeddings.
    """
    who = "" if domain is None else f" (source {domain})"
    source_labels = np.asarray(source_labels)
    target_labels = np.asarray(target_labels)
    soft = None
    if target_unlabeled_emb is not None:
        if unlabeled_soft_labels is None:
            raise ConfigError("unlabeled embeddings require soft labels")
        soft = np.asarray(unlabeled_soft_labels, dtype=np.float64)
        if soft.shape != (target_unlabeled_emb.shape[0], num_classes):
            raise ShapeError(
                f"soft labels {soft.shape} do not match unlabeled embeddings "
                f"{target_unlabeled_emb.shape} with {num_classes} classes"
            )
        if np.any(np.abs(soft.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigError("soft-label rows must sum to 1 within 1e-9")

    total = None
    for c in range(num_classes):
        src_mask = (source_labels == c).astype(np.float64)
        n_src = src_mask.sum()
        if n_src < 1:
            raise ConfigError(f"class {c} has no samples{who}")
        src_mean = weighted_row_sum(source_emb, src_mask) / n_src

        tgt_mask = (target_labels == c).astype(np.float64)
        denom = float(tgt_mask.sum())
        numerator = weighted_row_sum(target_labeled_emb, tgt_mask)
        if soft is not None:
            denom += float(soft[:, c].sum())
            numerator = numerator + weighted_row_sum(target_unlabeled_emb, soft[:, c])
        if denom <= 0.0:
            raise ConfigError(f"class {c} has zero labeled-plus-soft target mass{who}")
        gap = sum_sq(numerator / denom - src_mean)
        total = gap if total is None else total + gap
    return total / num_classes


@dataclass(frozen=True)
class SourceWeightState:
    """Per-source divergences and the weights derived from them."""

    deltas: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.deltas) != len(self.weights):
            raise ShapeError("deltas and weights must have equal length")


def _clipped_sigmoid_values(x) -> np.ndarray:
    return np.minimum(sigmoid_values(x), _SIGMOID_CEILING)


def source_weights(deltas: Sequence[float]) -> SourceWeightState:
    """Weight each source by the mean squashed divergence of the others.

    w_k averages sigmoid(delta_j) over j != k, so w_k never depends on
    delta_k and lands in [0.5, 1) for finite non-negative divergences. A
    single source keeps weight 1 (nothing to compare against).
    """
    deltas = tuple(float(d) for d in deltas)
    if not deltas:
        raise ConfigError("at least one source divergence is required")
    for d in deltas:
        if not np.isfinite(d) or d < 0.0:
            raise ConfigError(f"divergences must be finite and non-negative, got {d}")
    if len(deltas) == 1:
        return SourceWeightState(deltas, (1.0,))
    k_total = len(deltas)
    sig = [float(_clipped_sigmoid_values(np.float64(d))) for d in deltas]
    inv = 1.0 / (k_total - 1)  # reciprocal-multiply, matching the tape path bit for bit
    weights = tuple(
        sum(sig[j] for j in range(k_total) if j != k) * inv for k in range(k_total)
    )
    return SourceWeightState(deltas, weights)


def source_weight_nodes(deltas: Sequence[Node]) -> list[Node | float]:
    """Tape version of `source_weights`; gradients flow into the divergences."""
    k_total = len(deltas)
    if k_total == 0:
        raise ConfigError("at least one source divergence is required")
    if k_total == 1:
        return [1.0]
    ceiling = _SIGMOID_CEILING
    sig = []
    for d in deltas:
        s = sigmoid(d)
        if float(s.value) > ceiling:  # saturate exactly like the value path
            s = s.tape.append("clip", np.float64(ceiling), (d.index,), (lambda g: g * 0.0,))
        sig.append(s)
    out: list[Node | float] = []
    for k in range(k_total):
        acc = None
        for j in range(k_total):
            if j == k:
                continue
            acc = sig[j] if acc is None else acc + sig[j]
        out.append(acc / (k_total - 1))
    return out


def classification_loss(
    model: ModelNodes,
    emb: TaskEmbeddings,
    batch: TaskBatch,
    weights: Sequence[Node | float],
    tau: float,
) -> Node:
    """Weighted source cross-entropy, labeled-target cross-entropy, and an
    optional squared penalty on classifier/transformer weight matrices
    (biases and the discriminator are never regularized)."""
    target_ce = softmax_cross_entropy(classify(model, emb.target_labeled), batch.target_onehot)
    total = target_ce
    for w_k, emb_k, onehot_k in zip(weights, emb.sources, batch.source_onehot):
        ce = softmax_cross_entropy(classify(model, emb_k), onehot_k)
        total = total + w_k * ce
    if tau > 0.0:
        seen: set[int] = set()
        penalty = None
        for node in [model.cls_w] + [w for t in (*model.sources, model.target) for w in (t.w1, t.w2)]:
            if node.index in seen:  # tied second layers count once
                continue
            seen.add(node.index)
            penalty = sum_sq(node) if penalty is None else penalty + sum_sq(node)
        total = total + tau * penalty
    return total


def domain_loss(
    model: ModelNodes,
    emb: TaskEmbeddings,
    weights: Sequence[Node | float],
    inverted: bool,
) -> Node:
    """Squared error between discriminator outputs and (optionally swapped)
    one-hot domain labels, averaged per domain; source terms are weighted,
    the target term covers labeled and unlabeled samples together."""
    n_l = emb.target_labeled.shape[0]
    n_u = 0 if emb.target_unlabeled is None else emb.target_unlabeled.shape[0]
    n_t = n_l + n_u
    se_l = squared_error(
        discriminate(model, emb.target_labeled), domain_label_rows(n_l, True, inverted)
    )
    if emb.target_unlabeled is None:
        total = se_l
    else:
        se_u = squared_error(
            discriminate(model, emb.target_unlabeled), domain_label_rows(n_u, True, inverted)
        )
        total = se_l * (n_l / n_t) + se_u * (n_u / n_t)
    for w_k, emb_k in zip(weights, emb.sources):
        n_k = emb_k.shape[0]
        se_k = squared_error(discriminate(model, emb_k), domain_label_rows(n_k, False, inverted))
        total = total + w_k * se_k
    return total


# -- full objectives -------------------------------------------------------------


@dataclass
class TransformerObjective:
    """The scalar minimized over transformers + classifier, with its parts."""

    tape: Tape
    objective: Node
    classification: Node
    consistency: Node | None
    inverted_domain: Node
    deltas: list[Node] | None
    weights: list[Node | float]


def divergence_nodes(
    emb: TaskEmbeddings, batch: TaskBatch, soft: np.ndarray | None
) -> list[Node]:
    return [
        class_conditional_mmd(
            emb_k,
            labels_k,
            emb.target_labeled,
            batch.target_labeled_labels,
            batch.num_classes,
            emb.target_unlabeled,
            soft,
            domain=k,
        )
        for k, (emb_k, labels_k) in enumerate(zip(emb.sources, batch.source_labels))
    ]


def build_transformer_objective(
    params: ModelParams,
    batch: TaskBatch,
    *,
    beta: float,
    tau: float,
    lg_norm: str = "l1",
    weighting: str = "conditional",
    slope: float = 0.01,
    soft: np.ndarray | None = None,
) -> TransformerObjective:
    """Assemble the loss minimized over {transformers, classifier}.

    Under conditional weighting the divergences and weights are rebuilt on
    the tape, so gradients reach the transformers both through the losses
    they scale and through the divergences themselves. Soft labels are
    constants; when not supplied they are computed from `params` first.
    The discriminator is frozen (lifted as constants).
    """
    if weighting not in ("conditional", "ones"):
        raise ConfigError(f"weighting must be 'conditional' or 'ones', got {weighting!r}")
    if lg_norm not in ("l1", "l2", "off", "tied"):
        raise ConfigError(f"lg_norm must be one of l1/l2/off/tied, got {lg_norm!r}")
    if soft is None and batch.target_unlabeled_x is not None and weighting == "conditional":
        soft = soft_labels(params, batch.target_unlabeled_x, slope)
    tape = Tape()
    model = lift_params(tape, params, train_fg=True, train_d=False)
    emb = embed_batch(model, tape, batch, slope)

    deltas: list[Node] | None = None
    if weighting == "conditional" and batch.num_sources >= 2:
        deltas = divergence_nodes(emb, batch, soft)
        weights = source_weight_nodes(deltas)
    else:
        weights = [1.0] * batch.num_sources

    cls = classification_loss(model, emb, batch, weights, tau)
    cons = None
    if lg_norm in ("l1", "l2") and batch.num_sources >= 1:
        cons = consistency_loss(tape, model, lg_norm)
    inv = domain_loss(model, emb, weights, inverted=True)

    objective = cls
    if cons is not None:
        objective = objective + cons
    if beta > 0.0:
        objective = objective + beta * inv
    return TransformerObjective(tape, objective, cls, cons, inv, deltas, weights)


def build_discriminator_objective(
    params: ModelParams,
    batch: TaskBatch,
    weights: Sequence[float],
    *,
    slope: float = 0.01,
    embedding_values: tuple | None = None,
) -> tuple[Tape, Node]:
    """Assemble the loss minimized over the discriminator alone.

    Transformers and classifier are frozen; weights are plain constants.
    Precomputed embedding arrays may be supplied to skip the forward pass
    through the (frozen) transformers.
    """
    tape = Tape()
    model = lift_params(tape, params, train_fg=False, train_d=True)
    if embedding_values is not None:
        src_vals, lab_val, unlab_val = embedding_values
        emb = TaskEmbeddings(
            [tape.constant(v) for v in src_vals],
            tape.constant(lab_val),
            None if unlab_val is None else tape.constant(unlab_val),
        )
    else:
        emb = embed_batch(model, tape, batch, slope)
    loss = domain_loss(model, emb, [float(w) for w in weights], inverted=False)
    return tape, loss
