"""
Minimal dense numeric core with reverse-mode differentiation.

Every differentiable operation of the pipeline is composed from the primitives
in this module. A DerivativeRecord is built eagerly while the forward pass runs
and replayed in reverse by `backward`; values created without a record are
plain constants and cost nothing extra.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, ContractError, DimensionError, DomainError, EvaluationError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
# Returns one gradient per input (None where the input takes no gradient)
Rule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    parents: Tuple[Optional[int], ...]
    rule: Optional[Rule]


class DerivativeRecord:
    """Ordered log of operations; node ids are positions in the log."""

    def __init__(self):
        self._nodes: List[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _push(self, parents: Tuple[Optional[int], ...], rule: Optional[Rule]) -> int:
        self._nodes.append(_Node(parents, rule))
        return len(self._nodes) - 1

    def leaf(self, data: ArrayLike) -> "DiffValue":
        """Register an input whose gradient is wanted"""
        node_id = self._push((), None)
        return DiffValue(data, node_id, self)


class DiffValue:
    """Shaped float64 array, optionally tracked by a DerivativeRecord"""

    __slots__ = ("data", "node_id", "record")

    def __init__(self, data: ArrayLike, node_id: Optional[int] = None,
                 record: Optional[DerivativeRecord] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node_id = node_id
        self.record = record

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.record is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"DiffValue(shape={self.shape}, node_id={self.node_id})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, DiffValue):
            raise ContractError("division by a DiffValue is not supported; multiply by a constant")
        return mul(self, 1.0 / float(other))


def as_value(x: Union[DiffValue, ArrayLike]) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def constant(x: ArrayLike) -> DiffValue:
    return DiffValue(np.array(x, dtype=np.float64, copy=True))


def zeros(shape: Sequence[int]) -> DiffValue:
    return DiffValue(np.zeros(tuple(shape)))


def _make(data: np.ndarray, inputs: Sequence[DiffValue], rule: Rule) -> DiffValue:
    record = None
    for x in inputs:
        if x.record is not None:
            if record is not None and x.record is not record:
                raise ContractError("operands belong to different derivative records")
            record = x.record
    if record is None:
        return DiffValue(data)
    parents = tuple(x.node_id if x.record is record else None for x in inputs)
    return DiffValue(data, record._push(parents, rule), record)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- Kink monitoring ---

_MONITORS: List["KinkMonitor"] = []


class KinkMonitor:
    """
    While active, records how close a forward pass comes to the points where
    relu, abs and max-pool are not differentiable. `zero_margin` is the
    smallest |input| seen by relu or abs; `pool_gap` is the smallest positive
    gap between the two largest entries of a pooled slice. Exact ties are
    skipped: tied rows are copies of each other and move together.
    """

    def __init__(self):
        self.zero_margin = math.inf
        self.pool_gap = math.inf

    @property
    def margin(self) -> float:
        return min(self.zero_margin, self.pool_gap)

    def __enter__(self) -> "KinkMonitor":
        _MONITORS.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _MONITORS.remove(self)
        return False

    def observe_zero(self, data: np.ndarray) -> None:
        if data.size:
            self.zero_margin = min(self.zero_margin, float(np.abs(data).min()))

    def observe_pool(self, data: np.ndarray, axis: int) -> None:
        if data.shape[axis] < 2:
            return
        top = -np.partition(-data, 1, axis=axis)
        gaps = np.take(top, 0, axis=axis) - np.take(top, 1, axis=axis)
        gaps = gaps[gaps > 0]
        if gaps.size:
            self.pool_gap = min(self.pool_gap, float(gaps.min()))


def kink_margin(f: Callable[[Dict[str, DiffValue]], DiffValue], params: Mapping[str, ArrayLike]) -> float:
    """Distance of one untracked evaluation of `f` from its nearest kink"""
    with KinkMonitor() as monitor:
        f({name: DiffValue(arr) for name, arr in params.items()})
    return monitor.margin


# --- Elementwise ---

def add(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from e
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from e
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from e
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def relu(x: DiffValue) -> DiffValue:
    for monitor in _MONITORS:
        monitor.observe_zero(x.data)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: DiffValue) -> DiffValue:
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x: DiffValue) -> DiffValue:
    return _make(np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),))


def log(x: DiffValue) -> DiffValue:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs_(x: DiffValue) -> DiffValue:
    for monitor in _MONITORS:
        monitor.observe_zero(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def pow_scalar(x: DiffValue, p: float) -> DiffValue:
    if p == 0:
        return _make(np.ones_like(x.data), (x,), lambda g: (np.zeros_like(g),))
    return _make(np.power(x.data, p), (x,), lambda g: (g * p * np.power(x.data, p - 1.0),))


def clip(x: DiffValue, lo: float, hi: float) -> DiffValue:
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


# --- Shape ---

def reshape(x: DiffValue, shape: Sequence[int]) -> DiffValue:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from e
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: DiffValue) -> DiffValue:
    """Swap the last two axes"""
    if x.data.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 dimensions, got {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(x: DiffValue, shape: Sequence[int]) -> DiffValue:
    try:
        out = np.broadcast_to(x.data, tuple(shape)).copy()
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {x.shape} to {tuple(shape)}") from e
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(xs: Sequence[DiffValue], axis: int = -1) -> DiffValue:
    xs = [as_value(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise DimensionError(f"cannot concatenate shapes {[x.shape for x in xs]}") from e
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence[DiffValue], axis: int = 0) -> DiffValue:
    xs = [as_value(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise DimensionError(f"cannot stack shapes {[x.shape for x in xs]}") from e
    return _make(out, xs, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))))


def slice_axis(x: DiffValue, start: int, stop: int, axis: int = -1) -> DiffValue:
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def rule(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), rule)


def take(x: DiffValue, indices: Sequence[int], axis: int = 0) -> DiffValue:
    """Gather entries along an axis; repeated indices accumulate in backward"""
    idx = np.asarray(indices, dtype=np.int64)

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(x.data, idx, axis=axis), (x,), rule)


# --- Reductions ---

def sum_all(x: DiffValue) -> DiffValue:
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_axis(x: DiffValue, axis: int, keepdims: bool = False) -> DiffValue:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), rule)


def cumsum_axis(x: DiffValue, axis: int) -> DiffValue:
    def rule(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _make(np.cumsum(x.data, axis=axis), (x,), rule)


def maxpool_axis(x: DiffValue, axis: int) -> DiffValue:
    """Maximum along `axis`; the gradient goes to the first maximal index."""
    if x.data.ndim == 0 or not -x.data.ndim <= axis < x.data.ndim:
        raise DomainError(f"axis {axis} invalid for shape {x.shape}")
    if x.shape[axis] == 0:
        raise DomainError(f"max-pool over empty axis {axis} of shape {x.shape}")
    for monitor in _MONITORS:
        monitor.observe_pool(x.data, axis)
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)

    def rule(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(np.take_along_axis(x.data, arg, axis=axis).squeeze(axis), (x,), rule)


# --- Linear algebra ---

def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def softmax_last(x: DiffValue) -> DiffValue:
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise DomainError(f"softmax needs a non-empty trailing axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm_last(x: DiffValue, eps: float = 1e-5) -> DiffValue:
    """Normalize the trailing axis to zero mean and unit variance (no affine)"""
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def rule(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return _make(xhat, (x,), rule)


def linear(x: DiffValue, w: DiffValue, b: Optional[DiffValue] = None) -> DiffValue:
    """Affine map applied to the trailing dimension"""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear layer expects trailing dim {w.shape[0] if w.data.ndim else '?'}, "
                             f"got input {x.shape} with weight {w.shape}")
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, w.shape[0])), w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"bias shape {b.shape} does not match weight {w.shape}")
        out = add(out, b)
    return reshape(out, (*lead, w.shape[1]))


def layer_norm(x: DiffValue, gamma: DiffValue, beta: DiffValue) -> DiffValue:
    return add(mul(layer_norm_last(x), gamma), beta)


def mlp(x: DiffValue, params: Mapping[str, DiffValue], layer_sizes: Sequence[int]) -> DiffValue:
    """Affine-ReLU chain over the trailing dimension; no activation after the last layer"""
    n_layers = len(layer_sizes) - 1
    if n_layers < 1:
        raise ConfigurationError(f"an MLP needs at least two layer sizes, got {list(layer_sizes)}")
    for i in range(n_layers):
        w, b = params[f"w{i}"], params[f"b{i}"]
        if w.shape != (layer_sizes[i], layer_sizes[i + 1]) or b.shape != (layer_sizes[i + 1],):
            raise DimensionError(f"layer {i} parameters {w.shape}/{b.shape} do not match sizes "
                                 f"{layer_sizes[i]} -> {layer_sizes[i + 1]}")
        x = linear(x, w, b)
        if i < n_layers - 1:
            x = relu(x)
    return x


def multi_head_attention(q: DiffValue, k: DiffValue, v: DiffValue, k_pos: Optional[DiffValue],
                         params: Mapping[str, DiffValue], heads: int,
                         return_weights: bool = False):
    """
    Scaled dot-product attention per head with input and output projections.
    `k_pos`, when given, is added to the keys before the key projection.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError(f"attention expects 2-D inputs, got {q.shape}, {k.shape}, {v.shape}")
    c = q.shape[1]
    if k.shape[1] != c or v.shape[1] != c or k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if heads < 1 or c % heads != 0:
        raise ConfigurationError(f"channel count {c} is not divisible by {heads} heads")
    if k_pos is not None:
        if k_pos.shape != k.shape:
            raise DimensionError(f"key position encoding {k_pos.shape} does not match keys {k.shape}")
        k = add(k, k_pos)

    d = c // heads
    scale = 1.0 / math.sqrt(d)
    qp = linear(q, params["wq"], params["bq"])
    kp = linear(k, params["wk"])
    vp = linear(v, params["wv"], params["bv"])

    outs, weights = [], []
    for h in range(heads):
        qh = slice_axis(qp, h * d, (h + 1) * d)
        kh = slice_axis(kp, h * d, (h + 1) * d)
        vh = slice_axis(vp, h * d, (h + 1) * d)
        attn = softmax_last(mul(matmul(qh, transpose(kh)), scale))
        weights.append(attn.data)
        outs.append(matmul(attn, vh))
    out = linear(concat(outs, axis=-1), params["wo"], params["bo"])
    if return_weights:
        return out, weights
    return out


# --- Reverse pass ---

class Gradients:
    """Gradient lookup by value; unreachable leaves read as zeros"""

    def __init__(self, grads: Dict[int, np.ndarray]):
        self._grads = grads

    def of(self, value: DiffValue) -> np.ndarray:
        g = self._grads.get(value.node_id) if value.node_id is not None else None
        return np.zeros(value.shape) if g is None else g


def backward(loss: DiffValue, record: DerivativeRecord) -> Gradients:
    """Replay the record in reverse from a scalar loss"""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.record is not record or loss.node_id is None:
        raise ContractError("loss does not belong to the given derivative record")

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: Dict[int, np.ndarray] = {}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        node = record._nodes[node_id]
        if node.rule is None:
            leaves[node_id] = g
            continue
        for parent, pg in zip(node.parents, node.rule(g)):
            if parent is None or pg is None:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    return Gradients(leaves)


# --- Finite-difference oracle ---

ScalarFn = Callable[[Dict[str, DiffValue]], DiffValue]


def _evaluate(f: ScalarFn, params: Mapping[str, np.ndarray]) -> float:
    out = f({name: DiffValue(arr) for name, arr in params.items()})
    value = float(np.asarray(out.data).reshape(-1)[0])
    if not math.isfinite(value):
        raise EvaluationError(f"function evaluated to non-finite value {value}")
    return value


def finite_diff_errors(f: ScalarFn, params: Mapping[str, ArrayLike], eps: float = 1e-5,
                       max_coords: Optional[int] = None, seed: int = 0,
                       atol: float = 0.0) -> Dict[str, float]:
    """
    Max relative error per parameter between central differences and the
    reverse-mode gradient: |g_fd - g_ad| / max(1e-8, |g_fd| + |g_ad|).
    With `max_coords`, at most that many coordinates per parameter are checked.

    Absolute differences at or below `atol` count as agreement. It is off by
    default; callers that expect exactly-zero gradients pass a floor well
    below the gradient scale.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    if atol < 0:
        raise ContractError(f"atol must be non-negative, got {atol}")
    base = {name: np.array(arr, dtype=np.float64, copy=True) for name, arr in params.items()}

    record = DerivativeRecord()
    leaves = {name: record.leaf(arr.copy()) for name, arr in base.items()}
    loss = f(leaves)
    if not np.all(np.isfinite(loss.data)):
        raise EvaluationError("function evaluated to a non-finite value")
    if loss.record is None:
        grads = Gradients({})
    else:
        grads = backward(loss, record)

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    for name, arr in base.items():
        g_ad = grads.of(leaves[name]).reshape(-1)
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = _evaluate(f, base)
            flat[i] = orig - eps
            f_minus = _evaluate(f, base)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            diff = abs(g_fd - g_ad[i])
            err = 0.0 if diff <= atol else diff / max(1e-8, abs(g_fd) + abs(g_ad[i]))
            worst = max(worst, err)
        errors[name] = worst
    return errors


def finite_diff_check(f: ScalarFn, params: Mapping[str, ArrayLike], eps: float = 1e-5,
                      max_coords: Optional[int] = None, seed: int = 0,
                      atol: float = 0.0) -> float:
    """Max relative error over all checked coordinates"""
    errors = finite_diff_errors(f, params, eps=eps, max_coords=max_coords, seed=seed, atol=atol)
    return max(errors.values(), default=0.0)
