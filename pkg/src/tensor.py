"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every op is a `Function` subclass: `forward` works on numpy arrays, `backward`
maps the upstream gradient to one gradient per parent. `Function.apply` wires
the result into the dynamically built graph; `Tensor.backward` walks it once in
reverse topological order.
"""

import os
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from src.config import logger

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    """Raised when backward is called on a non-scalar or an already consumed graph."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


_debug_mode = os.environ.get("MMTVAE_DEBUG", "0") == "1"


def set_debug_mode(enabled: bool) -> None:
    """Turn the after-every-op finiteness check on or off."""
    global _debug_mode
    _debug_mode = enabled


def is_debug_mode() -> bool:
    return _debug_mode


_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them in the graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_tensor(value: Union["Tensor", ArrayLike]) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise ShapeError(f"Shape mismatch: {a} vs {b}") from None


def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast axes so that `grad` matches `to_shape`."""
    if grad.shape == to_shape:
        return grad
    while grad.ndim > len(to_shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(to_shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *parents: "Tensor"):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        """
        Run the forward pass and record the op in the graph.

        Args:
            *tensors: Operand tensors
            **kwargs: Op parameters passed through to `forward`

        Returns:
            The result tensor, linked to this op when any operand needs grad
        """
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        if _debug_mode and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        requires_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, _ctx=func if requires_grad else None)


class Tensor:
    """A dense row-major float64 array with optional gradient tracking."""

    # numpy operands defer to our reflected operators
    __array_ufunc__ = None

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _ctx: Optional[Function] = None,
    ):
        array = np.asarray(data, dtype=np.float64)
        self.data = array if array.flags.c_contiguous else array.copy(order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx
        self._consumed = False

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # *** backward pass ***

    def _topological_order(self) -> List["Tensor"]:
        """Post-order of the graph below this tensor; parents precede children."""
        order: List["Tensor"] = []
        visited = set()
        stack: List[Tuple["Tensor", bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            if node._consumed:
                raise GraphError("Graph already consumed by an earlier backward()")
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Populate `grad` on every requires_grad leaf reachable from this scalar."""
        if self.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("Graph already consumed by an earlier backward()")
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")

        order = self._topological_order()
        pending: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        for node in reversed(order):
            grad = pending.pop(id(node), None)
            ctx = node._ctx
            if ctx is None:
                if node.requires_grad and grad is not None:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue

            if grad is not None:
                for parent, parent_grad in zip(ctx.parents, ctx.backward(grad)):
                    if parent_grad is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    pending[key] = (
                        parent_grad if key not in pending else pending[key] + parent_grad
                    )
            node._ctx = None
            node._consumed = True

    # *** operators ***

    def __add__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return Add.apply(self, _as_tensor(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(_as_tensor(other), self)

    def __sub__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return Sub.apply(self, _as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(_as_tensor(other), self)

    def __mul__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return Mul.apply(self, _as_tensor(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(_as_tensor(other), self)

    def __truediv__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return Div.apply(self, _as_tensor(other))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(_as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    # *** unary and reduction methods ***

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def leaky_relu(self, alpha: float = 0.2) -> "Tensor":
        return LeakyRelu.apply(self, alpha=alpha)

    def relu(self) -> "Tensor":
        return LeakyRelu.apply(self, alpha=0.0)

    def clip(self, low: float, high: float) -> "Tensor":
        return Clip.apply(self, low=low, high=high)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        total = self.sum(axis=axis, keepdims=keepdims)
        count = self.size // max(total.size, 1) if self.size else 1
        return total * (1.0 / count)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=shape)

    def take_rows(self, indices: Sequence[int]) -> "Tensor":
        return TakeRows.apply(self, indices=np.asarray(indices, dtype=np.int64))


# *** elementwise ops ***


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            unbroadcast(grad * self.b, self.a.shape),
            unbroadcast(grad * self.a, self.b.shape),
        )


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            unbroadcast(grad / self.b, self.a.shape),
            unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (-grad,)


class Pow(Function):
    def forward(self, a: np.ndarray, exponent: float) -> np.ndarray:
        self.a, self.exponent = a, exponent
        return a**exponent

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.exponent * self.a ** (self.exponent - 1.0),)


class Exp(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = np.exp(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.out,)


class Log(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        if np.any(a <= 0):
            raise ValueError("log of non-positive value")
        self.a = a
        return np.log(a)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad / self.a,)


class Sigmoid(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = expit(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.out * (1.0 - self.out),)


class LeakyRelu(Function):
    def forward(self, a: np.ndarray, alpha: float) -> np.ndarray:
        self.positive = a > 0
        self.alpha = alpha
        return np.where(self.positive, a, alpha * a)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.where(self.positive, grad, self.alpha * grad),)


class Clip(Function):
    def forward(self, a: np.ndarray, low: float, high: float) -> np.ndarray:
        self.inside = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.where(self.inside, grad, 0.0),)


# *** reductions and movement ***


class Sum(Function):
    def forward(
        self, a: np.ndarray, axis: Optional[Union[int, Tuple[int, ...]]], keepdims: bool
    ) -> np.ndarray:
        self.shape = a.shape
        self.axis, self.keepdims = axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"Cannot reshape {a.shape} to {shape}") from None

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad.reshape(self.shape),)


class TakeRows(Function):
    def forward(self, a: np.ndarray, indices: np.ndarray) -> np.ndarray:
        self.shape, self.indices = a.shape, indices
        return a[indices]

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        out = np.zeros(self.shape)
        np.add.at(out, self.indices, grad)
        return (out,)


# *** convolutional ops (NCHW) ***


class Conv2d(Function):
    """Zero-padded cross-correlation (no kernel flip)."""

    def forward(self, x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
        if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv2d expects NCHW input and OIKK weight, got {x.shape}, {w.shape}")
        n, c, h, wid = x.shape
        out_c, in_c, k, _ = w.shape
        if c != in_c:
            raise ShapeError(f"Channel mismatch: input has {c}, weight expects {in_c}")
        out_h = (h + 2 * pad - k) // stride + 1
        out_w = (wid + 2 * pad - k) // stride + 1
        if out_h <= 0 or out_w <= 0:
            raise ShapeError(f"Non-positive conv2d output size {out_h}x{out_w}")

        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]

        self.windows, self.w = windows, w
        self.stride, self.pad = stride, pad
        self.padded_shape, self.input_shape = xp.shape, x.shape
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        k, s, pad = self.w.shape[2], self.stride, self.pad
        out_h, out_w = grad.shape[2], grad.shape[3]

        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))

        grad_xp = np.zeros(self.padded_shape)
        for ki in range(k):
            for kj in range(k):
                contrib = np.tensordot(grad, self.w[:, :, ki, kj], axes=([1], [0]))
                grad_xp[
                    :, :, ki : ki + s * (out_h - 1) + 1 : s, kj : kj + s * (out_w - 1) + 1 : s
                ] += contrib.transpose(0, 3, 1, 2)

        h, w = self.input_shape[2], self.input_shape[3]
        grad_x = grad_xp[:, :, pad : pad + h, pad : pad + w] if pad else grad_xp
        return grad_x, grad_w


class AvgPool2(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"avg_pool2 expects NCHW input, got {x.shape}")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * 0.25,)


class NearestUpsample2(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"nearest_upsample2 expects NCHW input, got {x.shape}")
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        n, c, h, w = grad.shape
        return (grad.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


class ConcatChannels(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim != 4 or b.ndim != 4:
            raise ShapeError(f"concat_channels expects NCHW inputs, got {a.shape}, {b.shape}")
        if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
            raise ShapeError(f"Batch/spatial mismatch: {a.shape} vs {b.shape}")
        self.split = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return grad[:, : self.split].copy(), grad[:, self.split :].copy()


class NarrowChannels(Function):
    def forward(self, a: np.ndarray, start: int, stop: int) -> np.ndarray:
        if not 0 <= start <= stop <= a.shape[1]:
            raise ShapeError(f"Channel range [{start}, {stop}) outside {a.shape[1]} channels")
        self.shape, self.start, self.stop = a.shape, start, stop
        return a[:, start:stop].copy()

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        out = np.zeros(self.shape)
        out[:, self.start : self.stop] = grad
        return (out,)


# *** functional surface ***

_UNARY: Dict[str, Callable[..., Tensor]] = {
    "neg": lambda a, alpha: Neg.apply(a),
    "exp": lambda a, alpha: Exp.apply(a),
    "log": lambda a, alpha: Log.apply(a),
    "sigmoid": lambda a, alpha: Sigmoid.apply(a),
    "leaky_relu": lambda a, alpha: LeakyRelu.apply(a, alpha=alpha),
}

_BINARY: Dict[str, type] = {"add": Add, "sub": Sub, "mul": Mul}


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None, alpha: float = 0.2) -> Tensor:
    """
    Apply a named elementwise op.

    Args:
        op: One of add, sub, mul, neg, exp, log, sigmoid, leaky_relu
        a: First operand
        b: Second operand, binary ops only
        alpha: Negative slope for leaky_relu

    Returns:
        The elementwise result
    """
    if op in _BINARY:
        if b is None:
            raise ValueError(f"Binary op '{op}' needs two operands")
        return _BINARY[op].apply(a, _as_tensor(b))
    if op in _UNARY:
        return _UNARY[op](a, alpha)
    raise ValueError(f"Unknown elementwise op: {op}")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return Conv2d.apply(x, w, stride=stride, pad=pad)


def avg_pool2(x: Tensor) -> Tensor:
    return AvgPool2.apply(x)


def nearest_upsample2(x: Tensor) -> Tensor:
    return NearestUpsample2.apply(x)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return ConcatChannels.apply(a, b)


def narrow_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return NarrowChannels.apply(x, start=start, stop=stop)


# *** finite-difference checking ***


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error, floored to avoid dividing by zero."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradient(
    loss_fn: Callable[[], Tensor],
    target: Tensor,
    h: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """
    Central-difference gradient of a scalar `loss_fn` w.r.t. entries of `target`.

    `loss_fn` must rebuild its graph on every call; `target.data` is perturbed
    in place and restored.
    """
    flat = target.data.reshape(-1)
    picked = range(flat.size) if indices is None else indices
    grads = np.zeros(len(picked))
    for out_index, flat_index in enumerate(picked):
        original = flat[flat_index]
        flat[flat_index] = original + h
        plus = loss_fn().item()
        flat[flat_index] = original - h
        minus = loss_fn().item()
        flat[flat_index] = original
        grads[out_index] = (plus - minus) / (2.0 * h)
    return grads


def check_gradients(
    loss_fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare backward() against central differences for every input.

    Args:
        loss_fn: Builds a scalar loss from `inputs`
        inputs: Leaf tensors with requires_grad
        h: Finite-difference step
        max_entries: If set, check only this many random entries per input
        rng: Generator used to pick the entries

    Returns:
        The largest relative error seen over the inputs
    """
    for tensor in inputs:
        tensor.zero_grad()
    loss_fn().backward()

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for tensor in inputs:
        analytic = np.zeros(tensor.size) if tensor.grad is None else tensor.grad.reshape(-1)
        if max_entries is not None and tensor.size > max_entries:
            indices = sorted(rng.choice(tensor.size, size=max_entries, replace=False).tolist())
        else:
            indices = list(range(tensor.size))
        numeric = numerical_gradient(loss_fn, tensor, h=h, indices=indices)
        error = relative_error(analytic[indices], numeric)
        logger.debug(f"Gradient check on {tensor.shape}: relative error {error:.3e}")
        worst = max(worst, error)
    return worst
