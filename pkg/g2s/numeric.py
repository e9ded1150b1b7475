"""
Dense tensors over numpy with reverse-mode automatic differentiation.

Every operation records its parents and a backward closure that maps the
output gradient to one gradient per parent. ``Tensor.backward`` walks the
graph in reverse topological order and accumulates into the ``grad`` of
leaf tensors that require gradients.
"""

from __future__ import annotations

import logging
import math
import struct
import threading
from collections.abc import Callable, Iterable, Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import numpy.typing as npt
from scipy.special import erf, expit


logger = logging.getLogger(__name__)

Array = npt.NDArray[Any]
Backward = Callable[[Array], Sequence[Array | None]]

CHECKPOINT_MAGIC = b"G2S1"
CHECKPOINT_VERSION = 1
LAYER_NORM_EPS = 1e-6

_grad_state = threading.local()


class ShapeMismatch(ValueError):
    def __init__(self, op: str, left: tuple[int, ...], right: tuple[int, ...]) -> None:
        super().__init__(f"{op}: incompatible shapes {left} and {right}")
        self.left = left
        self.right = right


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not fit the parameter registry."""


def is_grad_enabled() -> bool:
    return bool(getattr(_grad_state, "enabled", True))


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy array with an optional gradient and a recorded history."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data: npt.ArrayLike,
        requires_grad: bool = False,
        *,
        dtype: npt.DTypeLike = None,
    ) -> None:
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        self.data: Array = array
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.data.dtype

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self, grad: npt.ArrayLike | None = None) -> None:
        """
        Accumulate d(self)/d(leaf) into every leaf that requires gradients.

        :param grad: upstream gradient; defaults to 1 for a scalar tensor
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward", self.shape, ())
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=self.dtype)
            if seed.shape != self.data.shape:
                raise ShapeMismatch("backward", self.shape, tuple(seed.shape))
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, Array] = {id(self): seed}
        for node in reversed(order):
            upstream = grads.pop(id(node), None)
            if upstream is None:
                continue
            if node._backward is None:
                node.grad = upstream.copy() if node.grad is None else node.grad + upstream
                continue
            for parent, parent_grad in zip(node._parents, node._backward(upstream)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = _unbroadcast(parent_grad, parent.shape)
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Operand) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return _result(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key: Any) -> Tensor:
        shape, dtype = self.data.shape, self.dtype

        def backward(g: Array) -> tuple[Array]:
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, key, g)
            return (out,)

        return _result(self.data[key], (self,), backward)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        shape = self.data.shape

        def backward(g: Array) -> tuple[Array]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        total = self.sum(axis=axis, keepdims=keepdims)
        count = self.data.size // max(total.data.size, 1)
        return total * (1.0 / count)

    def reshape(self, *shape: int) -> Tensor:
        original = self.data.shape
        return _result(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(original),)
        )

    def transpose(self, *axes: int) -> Tensor:
        inverse = tuple(np.argsort(axes))
        return _result(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )


Operand = Tensor | float | int | Array


def _lift(value: Operand, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = None if like is None else like.dtype
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: Array, parents: tuple[Tensor, ...], backward: Backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _pair(op: str, a: Operand, b: Operand) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    left, right = _lift(a, like), _lift(b, like)
    try:
        np.broadcast_shapes(left.shape, right.shape)
    except ValueError:
        raise ShapeMismatch(op, left.shape, right.shape) from None
    return left, right


def add(a: Operand, b: Operand) -> Tensor:
    left, right = _pair("add", a, b)
    return _result(left.data + right.data, (left, right), lambda g: (g, g))


def sub(a: Operand, b: Operand) -> Tensor:
    left, right = _pair("sub", a, b)
    return _result(left.data - right.data, (left, right), lambda g: (g, -g))


def mul(a: Operand, b: Operand) -> Tensor:
    left, right = _pair("mul", a, b)
    return _result(
        left.data * right.data,
        (left, right),
        lambda g: (g * right.data, g * left.data),
    )


def div(a: Operand, b: Operand) -> Tensor:
    left, right = _pair("div", a, b)
    return _result(
        left.data / right.data,
        (left, right),
        lambda g: (g / right.data, -g * left.data / right.data**2),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; both operands must have at least two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeMismatch("matmul", a.shape, b.shape) from None
    return _result(
        data,
        (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
    )


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """
    Two-operand einsum with an explicit output, e.g. ``"bhqd,bhkd->bhqk"``.

    Every index of an operand must appear in the output or in the other
    operand, and no operand may repeat an index.
    """
    inputs, output = subscripts.replace(" ", "").split("->")
    left, right = inputs.split(",")
    for mine, theirs in ((left, right), (right, left)):
        if len(set(mine)) != len(mine) or not set(mine) <= set(theirs) | set(output):
            raise ValueError(f"unsupported einsum subscripts {subscripts!r}")
    try:
        data = np.einsum(subscripts, a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"einsum {subscripts}", a.shape, b.shape) from None
    return _result(
        data,
        (a, b),
        lambda g: (
            np.einsum(f"{output},{right}->{left}", g, b.data),
            np.einsum(f"{output},{left}->{right}", g, a.data),
        ),
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(
            "concat", tensors[0].shape, tensors[-1].shape
        ) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        data,
        tuple(tensors),
        lambda g: np.split(g, bounds, axis=axis),
    )


def take(table: Tensor, ids: npt.ArrayLike) -> Tensor:
    """Gather rows of ``table``; the backward pass scatter-adds."""
    index = np.asarray(ids, dtype=np.int64)
    shape, dtype = table.shape, table.dtype

    def backward(g: Array) -> tuple[Array]:
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _result(table.data[index], (table,), backward)


def embed(table: Tensor, ids: npt.ArrayLike) -> Tensor:
    return take(table, ids)


def softmax(x: Tensor, mask: npt.ArrayLike | None = None, axis: int = -1) -> Tensor:
    """
    Softmax along ``axis``; positions where ``mask`` is false get exactly 0.

    A row with every position masked is all zeros.
    """
    scores = x.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
        scores = np.where(keep, scores, -np.inf)
    top = scores.max(axis=axis, keepdims=True, initial=-np.inf)
    top = np.where(np.isfinite(top), top, 0.0)
    weights = np.exp(scores - top)
    total = weights.sum(axis=axis, keepdims=True)
    probs = (weights / np.where(total == 0, 1.0, total)).astype(x.dtype)

    def backward(g: Array) -> tuple[Array]:
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return _result(probs, (x,), backward)


def _log_softmax(data: Array, axis: int) -> Array:
    shifted = data - data.max(axis=axis, keepdims=True, initial=-np.inf)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax(x.data, axis)

    def backward(g: Array) -> tuple[Array]:
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeMismatch("layer_norm", x.shape, gamma.shape)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def backward(g: Array) -> tuple[Array, Array, Array]:
        g_normed = g * gamma.data
        g_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        return g_x, g * normed, g

    return _result(normed * gamma.data + beta.data, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU in its exact form ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
    return _result(
        (x.data * cdf).astype(x.dtype),
        (x,),
        lambda g: (g * (cdf + x.data * pdf),),
    )


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out**2),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity when ``rng`` is None or ``p`` is 0."""
    if rng is None or p <= 0.0:
        return x
    keep = rng.random(x.shape) >= p
    return x * (keep / (1.0 - p)).astype(x.dtype)


def cross_entropy(
    logits: Tensor,
    targets: npt.ArrayLike,
    mask: npt.ArrayLike | None = None,
    label_smoothing: float = 0.0,
    reduction: str = "mean",
) -> Tensor:
    """
    Token-level cross entropy against ``(1 - eps) * onehot + eps / V``.

    :param reduction: ``"mean"`` over unmasked tokens or ``"sum"``
    """
    ids = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != ids.shape:
        raise ShapeMismatch("cross_entropy", logits.shape, tuple(ids.shape))
    keep = np.ones(ids.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    vocab = logits.shape[-1]
    logp = _log_softmax(logits.data, axis=-1)
    picked = np.take_along_axis(logp, ids[..., None], axis=-1)[..., 0]
    per_token = -(1.0 - label_smoothing) * picked - label_smoothing * logp.mean(axis=-1)
    count = max(int(keep.sum()), 1) if reduction == "mean" else 1
    loss = np.asarray((per_token * keep).sum() / count, dtype=logits.dtype)

    def backward(g: Array) -> tuple[Array]:
        target = np.full(logp.shape, label_smoothing / vocab, dtype=logits.dtype)
        np.put_along_axis(
            target, ids[..., None], 1.0 - label_smoothing + label_smoothing / vocab, axis=-1
        )
        grad = (np.exp(logp) - target) * keep[..., None]
        return (g * grad / count,)

    return _result(loss, (logits,), backward)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """
    Return the largest relative error between reverse-mode and central
    finite-difference gradients over every element of ``params``.

    Entries where both gradients are below ``floor`` are measured against
    ``floor`` instead of their own size.
    """
    params = list(params)
    for param in params:
        param.grad = None
    f().backward()
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]
    worst = 0.0
    with no_grad():
        for param, expected in zip(params, analytic):
            for index in np.ndindex(*param.shape):
                original = param.data[index]
                param.data[index] = original + eps
                upper = f().item()
                param.data[index] = original - eps
                lower = f().item()
                param.data[index] = original
                numeric = (upper - lower) / (2.0 * eps)
                exact = float(expected[index])
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                worst = max(worst, error)
    return worst


class Parameter(NamedTuple):
    name: str
    tensor: Tensor
    trainable: bool = True


class ModelParams:
    """Ordered registry of named learnable tensors."""

    def __init__(
        self,
        rng: np.random.Generator | None = None,
        dtype: npt.DTypeLike = np.float32,
    ) -> None:
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Parameter] = {}

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def register(self, name: str, data: Array, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = Tensor(data.astype(self.dtype), requires_grad=trainable)
        self._params[name] = Parameter(name, tensor, trainable)
        return tensor

    def matrix(self, name: str, *shape: int, fan_in: int | None = None) -> Tensor:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in defaults to shape[0]."""
        bound = 1.0 / math.sqrt(fan_in if fan_in is not None else shape[0])
        return self.register(name, self.rng.uniform(-bound, bound, size=shape))

    def bias(self, name: str, *shape: int) -> Tensor:
        return self.register(name, np.zeros(shape))

    def ones(self, name: str, *shape: int) -> Tensor:
        return self.register(name, np.ones(shape))

    def embedding(self, name: str, rows: int, cols: int, scale: float) -> Tensor:
        return self.register(name, self.rng.normal(0.0, scale, size=(rows, cols)))

    def trainable(self) -> list[Tensor]:
        return [p.tensor for p in self._params.values() if p.trainable]

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.tensor.grad = None

    def num_elements(self) -> int:
        return sum(p.tensor.data.size for p in self._params.values())

    def to_bytes(self) -> bytes:
        chunks = [
            CHECKPOINT_MAGIC,
            struct.pack("<II", CHECKPOINT_VERSION, len(self._params)),
        ]
        for param in self._params.values():
            name = param.name.encode("utf-8")
            data = param.tensor.data
            chunks.append(struct.pack("<I", len(name)) + name)
            chunks.append(struct.pack(f"<I{data.ndim}Q", data.ndim, *data.shape))
            chunks.append(data.astype("<f4").tobytes())
        return b"".join(chunks)

    def from_bytes(self, blob: bytes) -> None:
        """
        Overwrite every registered parameter from a checkpoint blob.

        :raises CheckpointError: on bad magic, version, names or shapes
        """
        if blob[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        try:
            version, count = struct.unpack_from("<II", blob, 4)
            offset = 12
            loaded: dict[str, Array] = {}
            for _ in range(count):
                (length,) = struct.unpack_from("<I", blob, offset)
                offset += 4
                name = blob[offset : offset + length].decode("utf-8")
                offset += length
                (rank,) = struct.unpack_from("<I", blob, offset)
                offset += 4
                shape = struct.unpack_from(f"<{rank}Q", blob, offset)
                offset += 8 * rank
                size = math.prod(shape) * 4
                if offset + size > len(blob):
                    raise CheckpointError(f"truncated data for {name!r}")
                loaded[name] = np.frombuffer(
                    blob, dtype="<f4", count=math.prod(shape), offset=offset
                ).reshape(shape)
                offset += size
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint: {e}") from e
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if offset != len(blob):
            raise CheckpointError("trailing bytes after the last parameter")
        if list(loaded) != list(self._params):
            missing = sorted(set(self._params) ^ set(loaded))
            raise CheckpointError(f"parameter names differ: {missing}")
        for name, data in loaded.items():
            tensor = self._params[name].tensor
            if data.shape != tensor.data.shape:
                raise CheckpointError(
                    f"{name}: checkpoint shape {data.shape} != {tensor.data.shape}"
                )
            tensor.data = data.astype(self.dtype)

    def save(self, path: Path) -> None:
        path.write_bytes(self.to_bytes())
        logger.debug("Saved %d parameters to %s", len(self), path)

    def load(self, path: Path) -> None:
        self.from_bytes(path.read_bytes())
        logger.debug("Loaded %d parameters from %s", len(self), path)
