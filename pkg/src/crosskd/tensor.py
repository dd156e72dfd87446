"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a C-contiguous ``numpy.ndarray`` of dtype float64 (row-major
storage plus shape metadata).  Operations on tensors that require gradients
record a node holding references to their inputs and a backward rule; calling
:meth:`Tensor.backward` on a scalar walks that graph in reverse topological
order.

Gradient policy: gradients *accumulate* into leaf tensors across calls to
``backward``.  Callers (the optimizers in :mod:`crosskd.training`) zero them
explicitly before each step.  Intermediate nodes never retain gradients, so
the same graph can be differentiated more than once.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Parameter",
    "as_tensor",
    "concat",
    "conv2d",
    "dropout",
    "no_grad",
    "is_grad_enabled",
    "topological_order",
    "dump_text",
    "load_text",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Tensor:
    """N-dimensional float64 array that participates in autodiff.

    Args:
        data: Anything ``numpy.asarray`` accepts.
        requires_grad: Whether gradients should be accumulated into ``grad``.
    """

    __array_priority__ = 100.0  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = ""

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: tuple[Tensor, ...],
        backward: BackwardFn,
        op: str,
    ) -> Tensor:
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        out.grad = None
        out._op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------
    # metadata
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # ------------------------------------------------------------------
    # backward
    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf.

        Raises:
            ContractError: if ``self`` is not a scalar or does not depend on
                any tensor that requires gradients.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {list(self.shape)}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64).reshape(self.shape)

        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------------
    # elementwise arithmetic
    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __neg__(self) -> Tensor:
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise ContractError("only scalar exponents are supported")
        a = float(exponent)
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.power(x, a)

        def backward(g):
            if a == 0.0:
                return (np.zeros_like(x),)
            with np.errstate(divide="ignore", invalid="ignore"):
                d = a * np.power(x, a - 1.0)
            if a < 1.0:
                # subgradient convention at the singular point x = 0
                d = np.where(x == 0.0, 0.0, d)
            return (g * d,)

        return Tensor._from_op(out, (self,), backward, "pow")

    def sqrt(self) -> Tensor:
        return self ** 0.5

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> Tensor:
        x = self.data
        return Tensor._from_op(np.log(x), (self,), lambda g: (g / x,), "log")

    def relu(self) -> Tensor:
        x = self.data
        return Tensor._from_op(np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0.0),), "relu")

    # ------------------------------------------------------------------
    # reductions
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        axes = _normalize_axes(axis, self.ndim)
        shape = self.shape

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(self.data.sum(axis=axes, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def max(self, axis=None, keepdims: bool = False) -> Tensor:
        """Maximum along ``axis``; ties share the incoming gradient equally."""
        axes = _normalize_axes(axis, self.ndim)
        x = self.data
        kept = x.max(axis=axes, keepdims=True)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            hit = x == kept
            return (g * hit / hit.sum(axis=axes, keepdims=True),)

        out = kept if keepdims else kept.squeeze(axis=axes)
        return Tensor._from_op(out, (self,), backward, "max")

    # ------------------------------------------------------------------
    # shape manipulation
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {list(original)} into {list(shape)}") from exc
        return Tensor._from_op(out, (self,), lambda g: (g.reshape(original),), "reshape")

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose"
        )

    def swapaxes(self, a: int, b: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, index) -> Tensor:
        if isinstance(index, Tensor):
            raise ContractError("index with numpy arrays or slices, not tensors")
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(self.data[index], (self,), backward, "slice")

    # ------------------------------------------------------------------
    # linear algebra
    def matmul(self, other) -> Tensor:
        """(Batched) matrix product over the last two axes."""
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}")
        try:
            out = np.matmul(a, b)
        except ValueError as exc:
            raise DimensionError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}") from exc

        def backward(g):
            ga = np.matmul(g, np.swapaxes(b, -1, -2))
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        return Tensor._from_op(out, (self, other), backward, "matmul")

    __matmul__ = matmul

    def __rmatmul__(self, other) -> Tensor:
        return as_tensor(other).matmul(self)

    # ------------------------------------------------------------------
    # composite conveniences
    def softmax(self, axis: int = -1) -> Tensor:
        """Numerically stabilized softmax along ``axis``."""
        if self.size == 0 or self.shape[axis] < 1:
            raise DimensionError(f"softmax over an empty axis of shape {list(self.shape)}")
        x = self.data
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        return Tensor._from_op(y, (self,), backward, "softmax")

    def log_softmax(self, axis: int = -1) -> Tensor:
        if self.size == 0 or self.shape[axis] < 1:
            raise DimensionError(f"log_softmax over an empty axis of shape {list(self.shape)}")
        shifted = self - Tensor(self.data.max(axis=axis, keepdims=True))
        return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


class Parameter(Tensor):
    """Trainable leaf tensor; ``requires_grad`` defaults to True."""

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)

    def __repr__(self) -> str:
        return f"Parameter(shape={list(self.shape)})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(
                f"concat shape mismatch along axis {axis}: "
                + ", ".join(str(list(x.shape)) for x in tensors)
            )
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(out, tuple(tensors), lambda g: np.split(g, splits, axis=axis), "concat")


def _conv_output_side(side: int, kernel: int, stride: int, padding: int) -> int:
    return (side + 2 * padding - kernel) // stride + 1


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over NCHW input.

    ``weight`` has shape ``(C_out, C_in // groups, k, k)``.  With
    ``groups == C_in == C_out`` this is a depthwise convolution.  Inputs are
    unfolded tap-major (``B x C x k x k x H_out x W_out``) so every group is a
    single batched matrix product.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError(
            f"conv2d expects NCHW input and OIkk weight, got {list(xd.shape)}, {list(wd.shape)}"
        )
    batch, cin, height, width = xd.shape
    cout, cin_g, kh, kw = wd.shape
    if kh != kw:
        raise DimensionError("only square kernels are supported")
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise DimensionError(
            f"conv2d channel mismatch: input {list(xd.shape)}, weight {list(wd.shape)}, groups={groups}"
        )
    k = kh
    ho = _conv_output_side(height, k, stride, padding)
    wo = _conv_output_side(width, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {list(xd.shape)}")
    cout_g = cout // groups
    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        xp = xd
        cols = xd.reshape(batch, groups, cin_g, ho * wo)
    else:
        xp = _pad_spatial(xd, padding)
        sb, sc, sh, sw = xp.strides
        win = as_strided(xp, (batch, cin, k, k, ho, wo), (sb, sc, sh, sw, sh * stride, sw * stride))
        cols = np.ascontiguousarray(win).reshape(batch, groups, cin_g * k * k, ho * wo)
    wmat = wd.reshape(groups, cout_g, cin_g * k * k)
    out = np.matmul(wmat, cols).reshape(batch, cout, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        gg = g.reshape(batch, groups, cout_g, ho * wo)
        gw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wd.shape)
        gcols = np.matmul(np.swapaxes(wmat, -1, -2), gg)
        if pointwise:
            gx = gcols.reshape(xd.shape)
        else:
            gcols = gcols.reshape(batch, cin, k, k, ho, wo)
            gxp = np.zeros(xp.shape)
            hspan = stride * (ho - 1) + 1
            wspan = stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + hspan : stride, j : j + wspan : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + height, padding : padding + width] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        return x * 0.0
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def dump_text(t: Tensor | np.ndarray) -> str:
    """Serialize as ``shape: d1 d2 ...`` followed by row-major values."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = "shape:" + "".join(f" {d}" for d in arr.shape)
    values = " ".join(repr(float(v)) for v in arr.reshape(-1))
    return f"{header}\n{values}\n"


def load_text(text: str) -> Tensor:
    """Inverse of :func:`dump_text`."""
    lines = text.strip().splitlines()
    if not lines or not lines[0].startswith("shape:"):
        raise DimensionError("tensor dump must start with a 'shape:' line")
    shape = tuple(int(tok) for tok in lines[0][len("shape:"):].split())
    values = np.array([float(tok) for line in lines[1:] for tok in line.split()], dtype=np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if values.size != expected:
        raise DimensionError(f"tensor dump declares {expected} values, found {values.size}")
    return Tensor(values.reshape(shape))
