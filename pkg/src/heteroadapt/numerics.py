"""Dense float64 tensors, a reverse-mode gradient tape, and Adam.

Conventions: data matrices are (n, d) with samples in rows; vectors are
rank 1. Tape nodes hold raw ndarrays (scalars are 0-d); the `Tensor`
wrapper is the validated value type used for parameters and datasets.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray


class Tensor:
    """Immutable rank-1 or rank-2 array of finite float64 values.

    Construction always copies and validates: every dimension is positive
    and every entry is finite. The backing array is marked read-only, so
    tensors are safe to share across threads.
    """

    __slots__ = ("array",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        arr = np.array(values, dtype=np.float64, order="C")
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        if arr.ndim not in (1, 2):
            raise ShapeError(f"tensor rank must be 1 or 2, got shape {arr.shape}")
        if any(dim < 1 for dim in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must all be finite")
        arr.flags.writeable = False
        self.array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _as_array(values) -> Array:
    if isinstance(values, Tensor):
        return values.array
    return np.asarray(values, dtype=np.float64)


class Node:
    """Handle to one tape entry. `value` is a read-only float64 ndarray."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> Array:
        return self.tape._values[self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.tape._ops[self.index]}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("node/node division is not part of the op set")
        return scale(self, 1.0 / float(other))


class Tape:
    """Wengert-list record of primitive operations.

    Nodes are appended in execution order, so node ids are topologically
    ordered by construction (every parent id is smaller than its consumer).
    Each node stores the op name, parent ids, the forward value, and one
    gradient callback per parent; `backward` walks the list in reverse.
    """

    def __init__(self):
        self._ops: list[str] = []
        self._parents: list[tuple[int, ...]] = []
        self._values: list[Array] = []
        self._vjps: list[tuple[Callable[[Array], Array] | None, ...]] = []
        self._needs_grad: list[bool] = []
        self._param_indices: list[int] = []

    # -- construction ----------------------------------------------------

    def append(self, op, value, parents=(), vjps=(), needs_grad=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if needs_grad is None:
            needs_grad = any(self._needs_grad[p] for p in parents)
        self._ops.append(op)
        self._parents.append(tuple(parents))
        self._values.append(value)
        self._vjps.append(tuple(vjps))
        self._needs_grad.append(needs_grad)
        return Node(self, len(self._values) - 1)

    def param(self, tensor: Tensor) -> Node:
        """Register a trainable leaf; `backward` returns its gradient."""
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        node = self.append("param", tensor.array, needs_grad=True)
        self._param_indices.append(node.index)
        return node

    def constant(self, values) -> Node:
        """A non-trainable leaf (data, labels, frozen parameters)."""
        if isinstance(values, Tensor):
            arr = values.array  # already immutable, safe to alias
        else:
            arr = np.array(values, dtype=np.float64)
        return self.append("const", arr, needs_grad=False)

    # -- introspection ---------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return len(self._values)

    def op_name(self, index: int) -> str:
        return self._ops[index]

    def parents_of(self, index: int) -> tuple[int, ...]:
        return self._parents[index]

    @property
    def param_nodes(self) -> list[Node]:
        return [Node(self, i) for i in self._param_indices]

    # -- reverse pass ----------------------------------------------------

    def backward(self, loss: Node) -> list[Tensor]:
        """Gradients of a scalar loss, one Tensor per registered parameter.

        Parameters that do not reach the loss get zero gradients.
        """
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if self._values[loss.index].ndim != 0:
            raise ShapeError(
                f"backward needs a scalar loss node, got shape {self._values[loss.index].shape}"
            )
        grads: list[Array | None] = [None] * len(self._values)
        grads[loss.index] = np.ones((), dtype=np.float64)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            for parent, vjp in zip(self._parents[i], self._vjps[i]):
                if vjp is None or not self._needs_grad[parent]:
                    continue
                contribution = vjp(g)
                if grads[parent] is None:
                    grads[parent] = np.zeros_like(self._values[parent])
                grads[parent] += contribution
        out = []
        for idx in self._param_indices:
            g = grads[idx]
            out.append(Tensor(np.zeros_like(self._values[idx])) if g is None else Tensor(g))
        return out


def _same_tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def _lift(tape: Tape, other) -> Node:
    if isinstance(other, Node):
        return other
    return tape.constant(other)


# -- elementwise and scalar arithmetic ------------------------------------


def add(x: Node, y) -> Node:
    y = _lift(x.tape, y)
    tape = _same_tape(x, y)
    xv, yv = x.value, y.value
    if xv.shape != yv.shape:
        raise ShapeError(f"add shapes differ: {xv.shape} vs {yv.shape}")
    return tape.append("add", xv + yv, (x.index, y.index), (lambda g: g, lambda g: g))


def sub(x: Node, y) -> Node:
    y = _lift(x.tape, y)
    tape = _same_tape(x, y)
    xv, yv = x.value, y.value
    if xv.shape != yv.shape:
        raise ShapeError(f"sub shapes differ: {xv.shape} vs {yv.shape}")
    return tape.append("sub", xv - yv, (x.index, y.index), (lambda g: g, lambda g: -g))


def mul(x: Node, y) -> Node:
    if not isinstance(y, Node):
        return scale(x, float(y))
    tape = _same_tape(x, y)
    xv, yv = x.value, y.value
    if xv.shape != yv.shape:
        raise ShapeError(f"mul shapes differ: {xv.shape} vs {yv.shape}")
    return tape.append(
        "mul", xv * yv, (x.index, y.index), (lambda g: g * yv, lambda g: g * xv)
    )


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return x.tape.append("scale", x.value * c, (x.index,), (lambda g: g * c,))


# -- core network primitives -----------------------------------------------


def matmul_affine(x: Node, w: Node, b: Node) -> Node:
    """x (n, a) @ w (a, b) + bias (b,), bias broadcast over rows."""
    tape = _same_tape(x, w, b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 2 or wv.ndim != 2 or bv.ndim != 1:
        raise ShapeError(
            f"matmul_affine expects (n,a) @ (a,b) + (b,), got {xv.shape}, {wv.shape}, {bv.shape}"
        )
    if xv.shape[1] != wv.shape[0] or wv.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"matmul_affine dimensions disagree: x {xv.shape}, w {wv.shape}, b {bv.shape}"
        )
    out = xv @ wv + bv
    return tape.append(
        "matmul_affine",
        out,
        (x.index, w.index, b.index),
        (lambda g: g @ wv.T, lambda g: xv.T @ g, lambda g: g.sum(axis=0)),
    )


def relu(x: Node) -> Node:
    xv = x.value
    mask = xv > 0
    return x.tape.append("relu", np.maximum(xv, 0.0), (x.index,), (lambda g: g * mask,))


def leaky_relu(x: Node, slope: float = 0.01) -> Node:
    """Elementwise max(x, slope * x)."""
    slope = float(slope)
    if slope < 0:
        raise ValueError(f"leaky_relu slope must be >= 0, got {slope}")
    xv = x.value
    sv = slope * xv
    keep = xv >= sv
    out = np.where(keep, xv, sv)
    return x.tape.append(
        "leaky_relu", out, (x.index,), (lambda g: g * np.where(keep, 1.0, slope),)
    )


def sigmoid(x: Node) -> Node:
    s = sigmoid_values(x.value)
    return x.tape.append("sigmoid", s, (x.index,), (lambda g: g * s * (1.0 - s),))


def sigmoid_values(x: Array) -> Array:
    """Overflow-safe logistic 1 / (1 + exp(-x)) on raw arrays."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


# -- reductions and losses --------------------------------------------------


def weighted_row_sum(x: Node, weights) -> Node:
    """weights (n,) @ x (n, d) with constant weights -> (d,)."""
    wv = _as_array(weights)
    xv = x.value
    if xv.ndim != 2 or wv.ndim != 1 or wv.shape[0] != xv.shape[0]:
        raise ShapeError(f"weighted_row_sum got weights {wv.shape} for matrix {xv.shape}")
    return x.tape.append(
        "weighted_row_sum", wv @ xv, (x.index,), (lambda g: np.outer(wv, g),)
    )


def sum_sq(x: Node) -> Node:
    """Sum of squared entries, as a scalar node."""
    xv = x.value
    return x.tape.append("sum_sq", np.sum(xv * xv), (x.index,), (lambda g: g * 2.0 * xv,))


def sum_abs(x: Node) -> Node:
    """Sum of absolute entries; subgradient 0 at exact zeros."""
    xv = x.value
    return x.tape.append("sum_abs", np.sum(np.abs(xv)), (x.index,), (lambda g: g * np.sign(xv),))


def softmax_values(logits: Array) -> Array:
    """Row-wise stable softmax on raw arrays."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_onehot(y: Array) -> None:
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("label rows must be one-hot (entries restricted to 0/1)")
    bad = np.flatnonzero(y.sum(axis=1) != 1.0)
    if bad.size:
        raise ValueError(f"label row {bad[0]} is not one-hot (row sum != 1)")


def softmax_cross_entropy(logits: Node, onehot) -> Node:
    """Mean over rows of -log softmax(logits)[label], in log-sum-exp form.

    `onehot` is constant data (n, C) of exact 0/1 rows summing to 1.
    """
    y = _as_array(onehot)
    zv = logits.value
    if zv.ndim != 2 or y.shape != zv.shape:
        raise ShapeError(f"cross entropy shapes differ: logits {zv.shape}, labels {y.shape}")
    _check_onehot(y)
    n = zv.shape[0]
    m = zv.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(zv - m).sum(axis=1))
    picked = (zv * y).sum(axis=1)
    out = np.mean(lse - picked)
    softmax = np.exp(zv - m)
    softmax /= softmax.sum(axis=1, keepdims=True)
    return logits.tape.append(
        "softmax_cross_entropy",
        out,
        (logits.index,),
        (lambda g: g * (softmax - y) / n,),
    )


def squared_error(pred: Node, target) -> Node:
    """Mean over rows of the squared row difference (summed across columns)."""
    target = _lift(pred.tape, target)
    tape = _same_tape(pred, target)
    pv, tv = pred.value, target.value
    if pv.ndim != 2 or pv.shape != tv.shape:
        raise ShapeError(f"squared_error shapes differ: {pv.shape} vs {tv.shape}")
    n = pv.shape[0]
    diff = pv - tv
    out = np.sum(diff * diff) / n
    return tape.append(
        "squared_error",
        out,
        (pred.index, target.index),
        (lambda g: g * 2.0 * diff / n, lambda g: g * (-2.0) * diff / n),
    )


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Adam with bias correction; one (m, v) accumulator pair per parameter.

    Update: m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
    p <- p - lr * mhat / (sqrt(vhat) + eps). A zero gradient from a fresh
    state leaves parameters bit-identical.
    """

    def __init__(self, params: Sequence[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def step(self, params: Sequence[Tensor], grads: Sequence[Tensor]) -> list[Tensor]:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ShapeError(
                f"optimizer tracks {len(self.m)} tensors, got {len(params)} params / {len(grads)} grads"
            )
        self.step_count += 1
        t = self.step_count
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != self.m[i].shape or g.shape != self.m[i].shape:
                raise ShapeError(
                    f"parameter {i}: shapes {p.shape}/{g.shape} do not match state {self.m[i].shape}"
                )
            gv = g.array
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gv
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gv * gv
            mhat = self.m[i] / (1.0 - self.beta1 ** t)
            vhat = self.v[i] / (1.0 - self.beta2 ** t)
            out.append(Tensor(p.array - self.lr * mhat / (np.sqrt(vhat) + self.eps)))
        return out


# -- finite-difference oracle ------------------------------------------------


def grad_check(fn: Callable[[list[Tensor]], Node], params: Sequence[Tensor],
               h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    `fn` must build a fresh tape, register exactly `params` (in order) via
    `tape.param`, and return the scalar loss node. Coordinates where both
    gradients are below 1e-8 in magnitude compare absolutely, so saturated
    units do not inflate the ratio.
    """
    params = [p if isinstance(p, Tensor) else Tensor(p) for p in params]
    loss = fn(params)
    analytic = loss.tape.backward(loss)
    worst = 0.0
    for i, p in enumerate(params):
        flat = p.array.ravel()
        for j in range(flat.size):
            bumped = flat.copy()
            bumped[j] = flat[j] + h
            plus = [Tensor(bumped.reshape(p.shape)) if k == i else q for k, q in enumerate(params)]
            bumped[j] = flat[j] - h
            minus = [Tensor(bumped.reshape(p.shape)) if k == i else q for k, q in enumerate(params)]
            numeric = (float(fn(plus).value) - float(fn(minus).value)) / (2.0 * h)
            a = float(analytic[i].array.ravel()[j])
            denom = max(abs(a), abs(numeric))
            err = abs(a - numeric) if denom < 1e-8 else abs(a - numeric) / denom
            worst = max(worst, err)
    return worst
