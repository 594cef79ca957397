"""Dense-tensor arithmetic with tape-based reverse-mode differentiation.

Everything the encoders and losses need is built from the primitives here:
broadcasting elementwise arithmetic, (batched) matmul, reductions, a stable
softmax over the last axis, GELU, dropout and row normalization.  Values are
kept in float64 so repeated runs with the same seed reproduce gradients
bitwise.

A :class:`Tape` is single-owner while recording and during backward; distinct
tapes may be used from distinct threads.  Operations whose inputs are all
constants (no tape) stay off any tape and just return a constant result.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

# tanh-form GELU constant: sqrt(2/pi)
GELU_COEF = 0.7978845608028654
GELU_CUBIC = 0.044715


class Tape:
    """Recorded computation graph for one forward pass.

    Nodes are stored in execution order, so every parent index precedes its
    child and the backward sweep is a single reverse pass that visits each
    node at most once.
    """

    def __init__(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._backwards: list[Callable[[np.ndarray], tuple[np.ndarray, ...]] | None] = []
        self._leaves: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._parents)

    def leaf(self, values, name: str | None = None) -> "DiffTensor":
        """Register a trainable leaf; its gradient is reported by backward()."""
        data = _as_array(values)
        node_id = self._record((), None)
        self._leaves[node_id] = data
        return DiffTensor(data, tape=self, node_id=node_id)

    def _record(self, parents: tuple[int, ...], backward) -> int:
        self._parents.append(parents)
        self._backwards.append(backward)
        return len(self._parents) - 1

    def backward(self, loss: "DiffTensor") -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns a gradient for every registered leaf, keyed by node id;
        leaves the loss does not reach get a zero gradient.
        """
        if loss.tape is not self:
            raise ContractError("loss tensor was not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self._parents)
        grads[loss.node_id] = np.ones_like(loss.data)
        for nid in range(loss.node_id, -1, -1):
            gout = grads[nid]
            if gout is None:
                continue
            backward = self._backwards[nid]
            if backward is None:  # leaf
                continue
            for pid, gparent in zip(self._parents[nid], backward(gout)):
                if grads[pid] is None:
                    grads[pid] = gparent.copy()
                else:
                    grads[pid] += gparent
        out: dict[int, np.ndarray] = {}
        for leaf_id, values in self._leaves.items():
            g = grads[leaf_id]
            out[leaf_id] = np.zeros_like(values) if g is None else g
        return out


class DiffTensor:
    """A dense array, optionally attached to a tape node.

    Constructing one directly yields a constant (no gradient).  Leaves come
    from :meth:`Tape.leaf`; everything else is produced by the operations in
    this module.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, values, tape: Tape | None = None, node_id: int | None = None):
        self.data = _as_array(values)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        kind = "const" if self.tape is None else f"node {self.node_id}"
        return f"DiffTensor(shape={self.data.shape}, {kind})"

    # arithmetic sugar; all defer to the module-level ops
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "DiffTensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "DiffTensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "DiffTensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "DiffTensor":
        return reshape(self, shape)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))


def _as_array(values) -> np.ndarray:
    if isinstance(values, DiffTensor):
        return values.data
    return np.asarray(values, dtype=np.float64)


def as_tensor(x) -> DiffTensor:
    """Coerce arrays/scalars to a constant DiffTensor; pass tensors through."""
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x)


def constant(values) -> DiffTensor:
    return DiffTensor(values)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(grad.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(inputs: Sequence[DiffTensor], data: np.ndarray, backward) -> DiffTensor:
    """Record an op whose taped parents are the taped members of ``inputs``.

    ``backward(gout)`` must return one gradient per member of ``inputs``
    (position-aligned); gradients for constant members are dropped.
    """
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError("operands live on different tapes")
    if tape is None:
        return DiffTensor(data)
    taped_positions = [i for i, t in enumerate(inputs) if t.tape is not None]
    parents = tuple(inputs[i].node_id for i in taped_positions)

    def backward_taped(gout: np.ndarray) -> tuple[np.ndarray, ...]:
        all_grads = backward(gout)
        return tuple(all_grads[i] for i in taped_positions)

    node_id = tape._record(parents, backward_taped)
    return DiffTensor(data, tape=tape, node_id=node_id)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    return _make(
        (a, b),
        data,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    return _make(
        (a, b),
        data,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    return _make(
        (a, b),
        data,
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    return _make(
        (a, b),
        data,
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> DiffTensor:
    a = as_tensor(a)
    return _make((a,), -a.data, lambda g: (-g,))


def pow_const(a, exponent: float) -> DiffTensor:
    """a ** c for a fixed scalar exponent."""
    a = as_tensor(a)
    data = a.data ** exponent
    return _make((a,), data, lambda g: (g * exponent * a.data ** (exponent - 1.0),))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> DiffTensor:
    """Matrix product on the last two axes, batched over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires rank >= 2 operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g: np.ndarray):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make((a, b), data, backward)


def transpose(a) -> DiffTensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose requires rank >= 2, got shape {a.data.shape}")
    return _make((a,), np.swapaxes(a.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a, axes: Sequence[int]) -> DiffTensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _make((a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def reshape(a, shape) -> DiffTensor:
    a = as_tensor(a)
    original = a.data.shape
    return _make((a,), a.data.reshape(shape), lambda g: (g.reshape(original),))


def concat(tensors: Sequence, axis: int = -1) -> DiffTensor:
    parts = [as_tensor(t) for t in tensors]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray):
        pieces = []
        for i in range(len(parts)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _make(parts, data, backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make((a,), data, backward)


def tmean(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities


def log(a) -> DiffTensor:
    a = as_tensor(a)
    return _make((a,), np.log(a.data), lambda g: (g / a.data,))


def exp(a) -> DiffTensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _make((a,), data, lambda g: (g * data,))


def gelu(a) -> DiffTensor:
    """GELU in the tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = GELU_COEF * (x + GELU_CUBIC * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray):
        dinner = GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
        return (g * local,)

    return _make((a,), data, backward)


def softmax_rows(a) -> DiffTensor:
    """Stable softmax along the last axis (the rows of a matrix)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _make((a,), data, backward)


def log_softmax_rows(a) -> DiffTensor:
    """log(softmax) along the last axis; shift by a detached row max for stability."""
    a = as_tensor(a)
    shifted = a - constant(a.data.max(axis=-1, keepdims=True))
    return shifted - log(tsum(exp(shifted), axis=-1, keepdims=True))


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool = True) -> DiffTensor:
    """Inverted dropout; exact identity when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    a = as_tensor(a)
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode requires an rng")
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return mul(a, constant(keep))


def l2_normalize_rows(a, zero_rows: str = "error") -> DiffTensor:
    """Scale each row to unit Euclidean norm.

    ``zero_rows`` chooses the policy for rows of all zeros: "error" (default)
    raises, "guard" clamps the norm at 1e-12 so zero rows map to zero rows.
    """
    a = as_tensor(a)
    sq = tsum(mul(a, a), axis=-1, keepdims=True)
    if zero_rows == "error":
        if np.any(sq.data == 0.0):
            raise ContractError("l2_normalize_rows: zero row (degenerate embedding)")
    elif zero_rows == "guard":
        sq = sq + 1e-24
    else:
        raise ContractError(f"unknown zero_rows policy: {zero_rows!r}")
    return mul(a, pow_const(sq, -0.5))


def layer_norm(a, gain, bias, eps: float = 1e-5) -> DiffTensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    a = as_tensor(a)
    mu = tmean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = pow_const(var + eps, -0.5)
    return add(mul(mul(centered, inv), as_tensor(gain)), as_tensor(bias))


# ---------------------------------------------------------------------------
# gradient checking


def backward(tape: Tape, loss: DiffTensor) -> dict[int, np.ndarray]:
    """Module-level alias for Tape.backward."""
    return tape.backward(loss)


def grad_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map one DiffTensor to a scalar DiffTensor and must not keep
    state between calls; it is evaluated on constants for the numeric side.
    """
    x0 = _as_array(x)
    tape = Tape()
    xt = tape.leaf(x0)
    out = f(xt)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued f, got shape {out.data.shape}")
    if out.tape is None:  # f ignored x entirely
        analytic = np.zeros_like(x0)
    else:
        analytic = tape.backward(out)[xt.node_id]

    numeric = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h
        fp = f(DiffTensor(xp)).item()
        fm = f(DiffTensor(xm)).item()
        numeric[idx] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
