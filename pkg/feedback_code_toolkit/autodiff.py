"""
Minimal reverse-mode differentiation kernel for the feedback code models.

Operations run eagerly on float64 numpy arrays. While a Tape is active
(``with Tape() as tape:``) every operation with at least one input that requires a
gradient is recorded in execution order, together with a function that maps the output
gradient to the gradients of its inputs. ``backward`` walks the records in reverse
order, visiting each one exactly once, and accumulates into the ``grad`` slot of every
leaf tensor it reaches (normally the parameters of a ParameterStore).

Arrays are either single vectors of shape ``(d,)`` or batches of shape ``(B, d)``; the
only broadcasting supported is a 0-d constant against any shape.
"""

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from feedback_code_toolkit.exceptions import (
    CheckpointMismatchError,
    ContractError,
    DimensionError,
)

__all__ = [
    "LOG_CLAMP",
    "Tensor",
    "Tape",
    "ParameterStore",
    "GRUCellParams",
    "constant",
    "affine",
    "add",
    "add_n",
    "sub",
    "mul",
    "scale",
    "tanh_op",
    "sigmoid_op",
    "relu_op",
    "softmax_op",
    "cross_entropy_op",
    "concat",
    "stack",
    "select",
    "weighted_sum",
    "mean_op",
    "batch_standardize",
    "shift_scale",
    "normalized_weight_mul",
    "gru_cell",
    "backward",
    "finite_diff_check",
    "uniform_init",
    "add_affine",
    "add_gru",
]

LOG_CLAMP = 1e-12

# Absolute floor of the denominator in finite_diff_check.
_FD_FLOOR = 1e-3

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tensor:
    """A float64 array that may take part in a recorded computation.

    Attributes:
        values: The row-major array of values.
        requires_grad: Whether gradients flow into this tensor.
        grad: Gradient accumulator, same shape as ``values``. Only leaves (tensors not
          produced on the active tape) accumulate here.
        name: Optional parameter name.
    """

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Record:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations executed inside the block are recorded. Each
    thread (and each asyncio task) sees its own active tape.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._produced: set[int] = set()
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._records)

    def record(self, op: str, output: Tensor, inputs: Sequence[Tensor], vjp) -> None:
        self._records.append(_Record(op, output, tuple(inputs), vjp))
        self._produced.add(id(output))

    def ops(self) -> list[str]:
        return [record.op for record in self._records]

    def first_non_finite(self) -> Optional[str]:
        """Describes the first recorded node whose output holds a NaN or infinity."""
        for index, record in enumerate(self._records):
            if not np.all(np.isfinite(record.output.values)):
                return f"node {index} ({record.op}, shape {record.output.shape})"
        return None

    def backward(self, loss: Tensor) -> None:
        """Propagates d(loss)/d(node) from ``loss`` back to every reachable leaf."""
        if loss.values.size != 1:
            raise ContractError(
                f"backward needs a scalar loss node, got shape {loss.shape}"
            )
        if not loss.requires_grad:
            return
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for record in reversed(self._records):
            out_grad = pending.pop(id(record.output), None)
            if out_grad is None:
                continue
            for tensor, in_grad in zip(record.inputs, record.vjp(out_grad)):
                if in_grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in self._produced:
                    if key in pending:
                        pending[key] = pending[key] + in_grad
                    else:
                        pending[key] = in_grad
                else:
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.values)
                    tensor.grad += in_grad


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(values) -> Tensor:
    """Wraps values as a tensor that never receives gradients."""
    return Tensor(values)


def _make(op: str, values: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    output = Tensor(values)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(tensor.requires_grad for tensor in inputs):
        output.requires_grad = True
        tape.record(op, output, inputs, vjp)
    return output


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum())


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def affine(x, weight, bias=None) -> Tensor:
    """Computes ``W·x + b`` for a vector or ``x·Wᵀ + b`` row-wise for a batch.

    Args:
        x: Input of shape ``(d,)`` or ``(B, d)``.
        weight: Matrix of shape ``(m, d)``.
        bias: Optional; vector of shape ``(m,)``.

    Returns:
        Tensor of shape ``(m,)`` or ``(B, m)``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.ndim not in (1, 2) or weight.shape[1] != x.shape[-1]:
        raise DimensionError(
            f"affine: input shape {x.shape} does not fit weight shape {weight.shape}"
        )
    xv, wv = x.values, weight.values
    values = xv @ wv.T
    inputs = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (wv.shape[0],):
            raise DimensionError(
                f"affine: bias shape {bias.shape} does not fit weight shape {weight.shape}"
            )
        values = values + bias.values
        inputs.append(bias)

    def vjp(grad):
        grads = [grad @ wv, np.outer(grad, xv) if xv.ndim == 1 else grad.T @ xv]
        if bias is not None:
            grads.append(grad if grad.ndim == 1 else grad.sum(axis=0))
        return grads

    return _make("affine", values, inputs, vjp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)

    def vjp(grad):
        return _reduce_to(grad, a.shape), _reduce_to(grad, b.shape)

    return _make("add", a.values + b.values, (a, b), vjp)


def add_n(tensors: Sequence) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    for tensor in tensors[1:]:
        _check_same_shape("add_n", tensors[0], tensor)
    values = tensors[0].values
    for tensor in tensors[1:]:
        values = values + tensor.values

    def vjp(grad):
        return [_reduce_to(grad, tensor.shape) for tensor in tensors]

    return _make("add_n", values, tensors, vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("sub", a, b)

    def vjp(grad):
        return _reduce_to(grad, a.shape), _reduce_to(-grad, b.shape)

    return _make("sub", a.values - b.values, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("mul", a, b)
    av, bv = a.values, b.values

    def vjp(grad):
        return _reduce_to(grad * bv, a.shape), _reduce_to(grad * av, b.shape)

    return _make("mul", av * bv, (a, b), vjp)


def scale(x, factor: float) -> Tensor:
    """Multiplies by a constant."""
    x = _as_tensor(x)
    return _make("scale", x.values * factor, (x,), lambda grad: (grad * factor,))


def tanh_op(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.values)
    return _make("tanh", out, (x,), lambda grad: (grad * (1.0 - out * out),))


def sigmoid_op(x) -> Tensor:
    x = _as_tensor(x)
    out = expit(x.values)
    return _make("sigmoid", out, (x,), lambda grad: (grad * out * (1.0 - out),))


def relu_op(x) -> Tensor:
    x = _as_tensor(x)
    active = x.values > 0
    out = np.where(active, x.values, 0.0)
    return _make("relu", out, (x,), lambda grad: (grad * active,))


def softmax_op(logits) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    logits = _as_tensor(logits)
    shifted = logits.values - logits.values.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=-1, keepdims=True)

    def vjp(grad):
        return (probs * (grad - (grad * probs).sum(axis=-1, keepdims=True)),)

    return _make("softmax", probs, (logits,), vjp)


def cross_entropy_op(probs, target) -> Tensor:
    """Mean negative log-probability of the target classes.

    Args:
        probs: A probability vector of shape ``(m,)`` or a batch of shape ``(B, m)``.
          Values below LOG_CLAMP are clamped before the logarithm.
        target: A class index, or an integer array of shape ``(B,)``.

    Returns:
        Scalar tensor ``−mean(log p[target])``.

    Raises:
        IndexError: If a target is outside ``[0, m)``.
    """
    probs = _as_tensor(probs)
    targets = np.asarray(target, dtype=np.int64)
    if probs.ndim == 1:
        if targets.ndim != 0:
            raise DimensionError("cross_entropy: a single vector needs a single target")
        rows = probs.values[np.newaxis, :]
        targets = targets.reshape(1)
    elif probs.ndim == 2 and targets.shape == (probs.shape[0],):
        rows = probs.values
    else:
        raise DimensionError(
            f"cross_entropy: targets shape {targets.shape} does not fit {probs.shape}"
        )
    classes = rows.shape[1]
    if np.any(targets < 0) or np.any(targets >= classes):
        raise IndexError(f"cross_entropy: target outside [0, {classes})")
    batch = np.arange(rows.shape[0])
    picked = rows[batch, targets]
    clamped = np.maximum(picked, LOG_CLAMP)
    loss = np.asarray(-np.log(clamped).mean())

    def vjp(grad):
        out = np.zeros_like(rows)
        out[batch, targets] = -grad / (rows.shape[0] * clamped) * (picked > LOG_CLAMP)
        return (out.reshape(probs.shape),)

    return _make("cross_entropy", loss, (probs,), vjp)


def concat(tensors: Sequence) -> Tensor:
    """Concatenates along the last axis."""
    tensors = [_as_tensor(t) for t in tensors]
    leading = {t.shape[:-1] for t in tensors}
    if len(leading) != 1:
        raise DimensionError(
            f"concat: leading shapes differ: {[t.shape for t in tensors]}"
        )
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    values = np.concatenate([t.values for t in tensors], axis=-1)
    return _make(
        "concat", values, tensors, lambda grad: np.split(grad, splits, axis=-1)
    )


def stack(tensors: Sequence) -> Tensor:
    """Stacks equally shaped tensors along a new last axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) != 1:
        raise DimensionError(f"stack: shapes differ: {[t.shape for t in tensors]}")
    values = np.stack([t.values for t in tensors], axis=-1)

    def vjp(grad):
        return [grad[..., i] for i in range(len(tensors))]

    return _make("stack", values, tensors, vjp)


def select(x, index: int) -> Tensor:
    """Picks entry ``index`` of the last axis, dropping that axis."""
    x = _as_tensor(x)
    if not -x.shape[-1] <= index < x.shape[-1]:
        raise DimensionError(f"select: index {index} outside last axis of {x.shape}")

    def vjp(grad):
        out = np.zeros_like(x.values)
        out[..., index] = grad
        return (out,)

    return _make("select", x.values[..., index], (x,), vjp)


def weighted_sum(tensors: Sequence, alpha) -> Tensor:
    """Computes ``Σ_i alpha[i]·tensors[i]`` with trainable weights ``alpha``."""
    tensors = [_as_tensor(t) for t in tensors]
    alpha = _as_tensor(alpha)
    if alpha.shape != (len(tensors),):
        raise DimensionError(
            f"weighted_sum: {len(tensors)} terms but weights of shape {alpha.shape}"
        )
    if len({t.shape for t in tensors}) != 1:
        raise DimensionError("weighted_sum: terms differ in shape")
    av = alpha.values
    values = sum(av[i] * t.values for i, t in enumerate(tensors))

    def vjp(grad):
        grads = [av[i] * grad for i in range(len(tensors))]
        grads.append(np.array([(grad * t.values).sum() for t in tensors]))
        return grads

    return _make("weighted_sum", values, [*tensors, alpha], vjp)


def mean_op(x) -> Tensor:
    x = _as_tensor(x)
    size = x.values.size
    return _make(
        "mean",
        np.asarray(x.values.mean()),
        (x,),
        lambda grad: (np.full(x.shape, grad / size),),
    )


def batch_standardize(x, eps: float) -> Tensor:
    """Standardizes a batch with its own mean and population variance.

    The statistics are functions of the batch, so the gradient includes their
    dependence on every sample.
    """
    x = _as_tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"batch_standardize: expected a 1-d batch, got {x.shape}")
    centered = x.values - x.values.mean()
    std = math.sqrt(float(np.mean(centered**2)) + eps)
    normalized = centered / std

    def vjp(grad):
        return ((grad - grad.mean() - normalized * np.mean(grad * normalized)) / std,)

    return _make("batch_standardize", normalized, (x,), vjp)


def shift_scale(x, shift: float, factor: float) -> Tensor:
    """Computes ``(x + shift)·factor`` with constant shift and factor."""
    x = _as_tensor(x)
    return _make(
        "shift_scale", (x.values + shift) * factor, (x,), lambda grad: (grad * factor,)
    )


def normalized_weight_mul(x, v, index: int) -> Tensor:
    """Multiplies ``x`` by ``w[index]`` where ``w = √n·v/‖v‖₂`` and ``n = len(v)``.

    Every ``w`` built this way satisfies ``Σ w² = n`` exactly.
    """
    x, v = _as_tensor(x), _as_tensor(v)
    if v.ndim != 1 or not 0 <= index < v.shape[0]:
        raise DimensionError(f"normalized_weight_mul: index {index} outside {v.shape}")
    vv = v.values
    n = vv.shape[0]
    norm = float(np.linalg.norm(vv))
    weight = math.sqrt(n) * vv[index] / norm

    def vjp(grad):
        total = float((grad * x.values).sum())
        dw_dv = -math.sqrt(n) * vv[index] * vv / norm**3
        dw_dv[index] += math.sqrt(n) / norm
        return grad * weight, total * dw_dv

    return _make("normalized_weight_mul", x.values * weight, (x, v), vjp)


class GRUCellParams(NamedTuple):
    """Weights of one gated recurrent unit.

    ``w_*`` act on the input (shape ``(state, input)``), ``u_*`` on the previous state
    (shape ``(state, state)``) and ``b_*`` are biases (shape ``(state,)``).
    """

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[1]

    @property
    def state_dim(self) -> int:
        return self.u_z.shape[0]


def gru_cell(u, h, params: GRUCellParams) -> Tensor:
    """Advances a GRU by one step.

    z = σ(W_z u + U_z h + b_z), r = σ(W_r u + U_r h + b_r),
    ĥ = tanh(W_h u + U_h (r⊙h) + b_h), h' = (1 − z)⊙h + z⊙ĥ.
    """
    u, h = _as_tensor(u), _as_tensor(h)
    if u.shape[-1] != params.input_dim or h.shape[-1] != params.state_dim:
        raise DimensionError(
            f"gru_cell: input {u.shape} / state {h.shape} do not fit a cell with "
            f"input {params.input_dim} and state {params.state_dim}"
        )
    update = sigmoid_op(add(affine(u, params.w_z, params.b_z), affine(h, params.u_z)))
    reset = sigmoid_op(add(affine(u, params.w_r, params.b_r), affine(h, params.u_r)))
    candidate = tanh_op(
        add(affine(u, params.w_h, params.b_h), affine(mul(reset, h), params.u_h))
    )
    return add(h, mul(update, sub(candidate, h)))


class ParameterStore:
    """Named trainable arrays, each with a gradient slot of the same shape."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already exists")
        values = np.array(values, dtype=np.float64, copy=True, order="C")
        tensor = Tensor(values, requires_grad=True, name=name)
        tensor.grad = np.zeros_like(values)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return [name for name in self._params if name.startswith(prefix)]

    def items(self):
        return self._params.items()

    @property
    def num_parameters(self) -> int:
        return sum(t.values.size for t in self._params.values())

    def grad(self, name: str) -> np.ndarray:
        return self._params[name].grad

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = np.zeros_like(tensor.values)

    def global_grad_norm(self, names: Optional[Sequence[str]] = None) -> float:
        names = self._params if names is None else names
        return math.sqrt(sum(float(np.sum(self.grad(n) ** 2)) for n in names))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Overwrites every parameter in place.

        Raises:
            CheckpointMismatchError: If names or shapes differ.
        """
        missing = set(self._params) - set(state)
        unexpected = set(state) - set(self._params)
        if missing or unexpected:
            raise CheckpointMismatchError(
                f"parameter names differ: missing {sorted(missing)}, "
                f"unexpected {sorted(unexpected)}"
            )
        for name, values in state.items():
            tensor = self._params[name]
            if tuple(np.shape(values)) != tensor.shape:
                raise CheckpointMismatchError(
                    f"parameter {name!r}: stored shape {np.shape(values)} "
                    f"but model shape {tensor.shape}"
                )
            tensor.values[...] = values

    def copy(self) -> "ParameterStore":
        post_store = ParameterStore()
        for name, tensor in self._params.items():
            post_store.add(name, tensor.values).grad[...] = tensor.grad
        return post_store


def backward(tape: Tape, loss_node: Tensor, store: Optional[ParameterStore] = None):
    """Runs the reverse pass of ``tape`` from ``loss_node``.

    Gradients accumulate additively into the gradient slots of the leaves reached,
    so callers zero the store first when they want fresh gradients.

    Returns:
        The store that was passed in, if any.
    """
    tape.backward(loss_node)
    return store


def finite_diff_check(
    f: Callable[[ParameterStore], Tensor], store: ParameterStore, h: float = 1e-5
) -> float:
    """Compares backward() against central differences on every coordinate.

    Args:
        f: Builds a scalar tensor from the parameters in ``store``. Called once under a
          tape and twice per coordinate without one.
        store: The parameters to check. Values are restored afterwards; gradients are
          left holding the analytic result.
        h: Perturbation size.

    Returns:
        The maximum over coordinates of ``|analytic − numeric| / max(|analytic|,
        |numeric|, 1e-3)``.
    """
    if h <= 0:
        raise ContractError(f"finite_diff_check needs h > 0, got {h}")
    store.zero_grad()
    with Tape() as tape:
        loss = f(store)
    backward(tape, loss, store)

    worst = 0.0
    for name, tensor in store.items():
        analytic = store.grad(name).reshape(-1)
        flat = tensor.values.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = f(store).item()
            flat[i] = original - h
            lower = f(store).item()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * h)
            denom = max(abs(analytic[i]), abs(numeric), _FD_FLOOR)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int):
    """Draws from Uniform(−1/√fan_in, 1/√fan_in)."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_affine(
    store: ParameterStore,
    prefix: str,
    in_dim: int,
    out_dim: int,
    rng: np.random.Generator,
) -> tuple[Tensor, Tensor]:
    """Registers ``prefix.weight`` (out_dim × in_dim) and ``prefix.bias`` (zeros)."""
    weight = store.add(f"{prefix}.weight", uniform_init(rng, (out_dim, in_dim), in_dim))
    bias = store.add(f"{prefix}.bias", np.zeros(out_dim))
    return weight, bias


def add_gru(
    store: ParameterStore,
    prefix: str,
    input_dim: int,
    state_dim: int,
    rng: np.random.Generator,
) -> GRUCellParams:
    """Registers the nine arrays of one GRU cell under ``prefix``."""
    tensors = {}
    for gate in ("z", "r", "h"):
        tensors[f"w_{gate}"] = store.add(
            f"{prefix}.w_{gate}", uniform_init(rng, (state_dim, input_dim), input_dim)
        )
        tensors[f"u_{gate}"] = store.add(
            f"{prefix}.u_{gate}", uniform_init(rng, (state_dim, state_dim), state_dim)
        )
        tensors[f"b_{gate}"] = store.add(f"{prefix}.b_{gate}", np.zeros(state_dim))
    return GRUCellParams(**tensors)
