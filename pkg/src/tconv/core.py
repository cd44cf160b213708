"""Dense float64 tensors and a tape-based reverse-mode differentiator.

Every differentiable operation in the package is a plain function that
computes its forward value with numpy and, when a :class:`Tape` is active
and at least one input requires a gradient, records a backward rule on that
tape. ``tape.backward(loss)`` replays the rules in reverse recording order
and *accumulates* into the ``grad`` buffers of the leaf tensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

__all__ = [
    "Tensor",
    "Tape",
    "ContractError",
    "EvaluationError",
    "current_tape",
    "zero_grads",
    "gradcheck",
    "GradcheckEntry",
    "save_tsr",
    "load_tsr",
]


class ContractError(ValueError):
    """An argument violates the documented shape or value contract of an op."""


class EvaluationError(FloatingPointError):
    """A function evaluation produced a non-finite value."""


class Tensor:
    """Row-major float64 array with an optional gradient buffer.

    Tensors built by users (parameters, inputs) are validated to be finite.
    Intermediate results produced by ops skip the check.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *, check: bool = True):
        arr = np.array(data, dtype=DTYPE)
        if check and not np.all(np.isfinite(arr)):
            label = f"tensor {name!r}" if name else "tensor"
            raise ContractError(f"{label} contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        out.grad = None
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar; the implementations live below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded.
    Tapes nest, and only the innermost one records.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, inputs, output, backward) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Propagate d(loss)/d(leaf) into ``leaf.grad`` (accumulating).

        Only the nodes recorded on this tape are visited, each exactly once.
        """
        if seed is None:
            if loss.size != 1:
                raise ContractError("backward needs a scalar loss or an explicit seed")
            seed = np.ones_like(loss.data)
        adjoint: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=DTYPE)}
        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = adjoint.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.backward(g)
            for t, gt in zip(node.inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + gt
                else:
                    adjoint[key] = gt
                if key not in produced:
                    leaves[key] = t
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            g = adjoint.get(key)
            if g is None:
                continue
            g = np.broadcast_to(g, t.shape)
            t.grad = np.array(g, dtype=DTYPE) if t.grad is None else t.grad + g


_TAPES: list[Tape] = []


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._result(np.asarray(x, dtype=DTYPE), False)


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` as an op result and record ``backward`` if needed.

    ``backward`` maps the output adjoint to one adjoint (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._result(out_data, needs)
    tape = current_tape()
    if needs and tape is not None:
        tape.record(inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record(ad * bd, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ContractError(f"matmul shapes {ad.shape} and {bd.shape} do not chain")
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.sum(a.data, axis=axis), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    axes = range(a.ndim) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    count = int(np.prod([shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record(np.mean(a.data, axis=axis), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return record(a.data[index], (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return record(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def repeat_axis(a: Tensor, repeats: int, axis: int) -> Tensor:
    """Insert a new axis of length ``repeats`` at ``axis`` by replication."""
    expanded = np.expand_dims(a.data, axis)
    shape = list(expanded.shape)
    shape[axis] = repeats
    return record(np.broadcast_to(expanded, shape).copy(), (a,), lambda g: (g.sum(axis=axis),))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ContractError(f"logits {z.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ContractError(f"labels must lie in [0, {z.shape[1]}), got range [{labels.min()}, {labels.max()}]")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return record(np.asarray(loss), (logits,), backward)


# ----------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradcheckEntry:
    param: int
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float
    flagged: bool


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
              tol: float = 1e-4, max_per_param: int | None = None,
              rng: np.random.Generator | None = None) -> list[GradcheckEntry]:
    """Compare tape gradients of the scalar ``f()`` with central differences.

    ``f`` is re-evaluated with each element of each param perturbed by
    ``±h`` in place. ``max_per_param`` checks a random subset of elements.
    """
    if h <= 0:
        raise ContractError("step size h must be positive")
    params = list(params)
    saved = [p.grad for p in params]
    zero_grads(params)
    with Tape() as tape:
        out = f()
    value = float(out.data)
    if not np.isfinite(value):
        raise EvaluationError("f is not finite at the unperturbed point")
    tape.backward(out)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    report = []
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, max_per_param, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            where = tuple(int(j) for j in np.unravel_index(i, p.shape))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"non-finite f when perturbing param {k} element {where}")
            num = (fp - fm) / (2 * h)
            ana = float(analytic[k].reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            report.append(GradcheckEntry(k, where, ana, num, rel, rel > tol))
    return report


# ----------------------------------------------------------------------------
# .tsr serialization: one JSON header line, then little-endian float64 payload


def save_tsr(path, array) -> None:
    arr = np.array(array.data if isinstance(array, Tensor) else array, dtype="<f8", order="C")
    header = json.dumps({"shape": list(arr.shape), "dtype": "f64"})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(arr.tobytes(order="C"))


def load_tsr(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    end = raw.index(b"\n")
    header = json.loads(raw[:end].decode("utf-8"))
    if header.get("dtype") != "f64":
        raise ContractError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    payload = np.frombuffer(raw[end + 1:], dtype="<f8")
    if payload.size != int(np.prod(shape, dtype=np.int64)):
        raise ContractError(f"{path}: payload has {payload.size} values, header says {shape}")
    return payload.reshape(shape).astype(DTYPE)
