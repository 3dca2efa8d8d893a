"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a read-only numpy array. Every differentiable operation is a
`Function` subclass: `forward` works on raw arrays, `backward` maps the gradient of
the output to one gradient (or None) per input. Calling `backward()` on a scalar
walks the recorded graph in reverse topological order and accumulates `.grad` on
the leaves that require it.
"""

import typing as t

import numpy as np

ArrayLike = t.Union[np.ndarray, float, int, t.Sequence[t.Any]]
Operand = t.Union["Tensor", np.ndarray, float, int]
Index = t.Any


def _freeze(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


class Tensor:
    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _ctx: t.Optional["Function"] = None,
        _copy: bool = True,
    ) -> None:
        array = np.array(data, dtype=np.float64) if _copy else np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = _freeze(array)
        self.requires_grad = requires_grad
        self.grad: t.Optional[np.ndarray] = None
        self._ctx = _ctx

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return int(self.data.shape[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: t.Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for a non-scalar tensor")
            grad = np.ones_like(self.data)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(_topological_order(self)):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._ctx is None:
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node._ctx.backward(node_grad)
            for parent, parent_grad in zip(node._ctx.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    # arithmetic
    def __add__(self, other: Operand) -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return Sub.apply(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return Sub.apply(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return Mul.apply(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return Div.apply(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return Div.apply(other, self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: Operand) -> "Tensor":
        return MatMul.apply(self, other)

    def __rmatmul__(self, other: Operand) -> "Tensor":
        return MatMul.apply(other, self)

    def __getitem__(self, index: Index) -> "Tensor":
        return GetItem.apply(self, index=index)

    # elementwise
    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def sqrt(self) -> "Tensor":
        return Pow.apply(self, exponent=0.5)

    # reductions
    def sum(self, axis: t.Optional[t.Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: t.Optional[t.Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else int(np.prod([self.data.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        return Max.apply(self, axis=axis, keepdims=keepdims)

    # shape
    def reshape(self, *shape: t.Union[int, tuple[int, ...]]) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=tuple(axes) if axes else None)


def as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative post-order; graphs of a full model are far deeper than the recursion limit
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the dimensions numpy broadcasting added to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """One node of the autodiff graph."""

    def __init__(self, *parents: Tensor) -> None:
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs: t.Any) -> np.ndarray:
        raise NotImplementedError()

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        raise NotImplementedError()

    @classmethod
    def apply(cls, *inputs: Operand, **kwargs: t.Any) -> Tensor:
        tensors = tuple(as_tensor(value) for value in inputs)
        fn = cls(*tensors)
        out = fn.forward(*(tensor.data for tensor in tensors), **kwargs)
        requires_grad = any(tensor.requires_grad for tensor in tensors)
        return Tensor(out, requires_grad=requires_grad, _ctx=fn if requires_grad else None, _copy=False)


class Add(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:  # type: ignore[override]
        return x + y

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        x, y = self.parents
        return unbroadcast(grad, x.shape), unbroadcast(grad, y.shape)


class Sub(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:  # type: ignore[override]
        return x - y

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        x, y = self.parents
        return unbroadcast(grad, x.shape), unbroadcast(-grad, y.shape)


class Mul(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:  # type: ignore[override]
        return x * y

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        x, y = self.parents
        return unbroadcast(grad * y.data, x.shape), unbroadcast(grad * x.data, y.shape)


class Div(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:  # type: ignore[override]
        return x / y

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        x, y = self.parents
        grad_x = grad / y.data
        grad_y = -grad * x.data / (y.data * y.data)
        return unbroadcast(grad_x, x.shape), unbroadcast(grad_y, y.shape)


class Neg(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        return -x

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        return (-grad,)


class Pow(Function):
    def forward(self, x: np.ndarray, exponent: float) -> np.ndarray:  # type: ignore[override]
        self.exponent = exponent
        return np.power(x, exponent)

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        (x,) = self.parents
        return (grad * self.exponent * np.power(x.data, self.exponent - 1.0),)


class Exp(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.out = np.exp(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        return (grad * self.out,)


class Log(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        return np.log(x)

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        (x,) = self.parents
        return (grad / x.data,)


class Tanh(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        return (grad * (1.0 - self.out * self.out),)


class Abs(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        return np.abs(x)

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        (x,) = self.parents
        return (grad * np.sign(x.data),)


class MatMul(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:  # type: ignore[override]
        if x.ndim < 2 or y.ndim < 2:
            raise ValueError(f"matmul needs operands of rank >= 2, got {x.shape} and {y.shape}")
        return np.matmul(x, y)

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        x, y = self.parents
        grad_x = np.matmul(grad, np.swapaxes(y.data, -1, -2))
        grad_y = np.matmul(np.swapaxes(x.data, -1, -2), grad)
        return unbroadcast(grad_x, x.shape), unbroadcast(grad_y, y.shape)


class Sum(Function):
    def forward(self, x: np.ndarray, axis: t.Any = None, keepdims: bool = False) -> np.ndarray:  # type: ignore[override]
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        (x,) = self.parents
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, axis=self.axis)
        return (np.broadcast_to(grad, x.shape).copy(),)


class Max(Function):
    """Max along one axis; the gradient goes to the first maximal element."""

    def forward(self, x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:  # type: ignore[override]
        self.axis = axis
        self.keepdims = keepdims
        self.argmax = np.argmax(x, axis=axis)
        return np.max(x, axis=axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        (x,) = self.parents
        if self.keepdims:
            grad = np.squeeze(grad, axis=self.axis)
        out = np.zeros(x.shape)
        np.put_along_axis(
            out,
            np.expand_dims(self.argmax, axis=self.axis),
            np.expand_dims(grad, axis=self.axis),
            axis=self.axis,
        )
        return (out,)


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:  # type: ignore[override]
        return x.reshape(shape)

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        (x,) = self.parents
        return (grad.reshape(x.shape),)


class Transpose(Function):
    def forward(self, x: np.ndarray, axes: t.Optional[tuple[int, ...]] = None) -> np.ndarray:  # type: ignore[override]
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    """Basic or integer-array indexing; the gradient is scattered back with `np.add.at`."""

    def forward(self, x: np.ndarray, index: Index) -> np.ndarray:  # type: ignore[override]
        self.index = index
        return np.array(x[index])

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        (x,) = self.parents
        out = np.zeros(x.shape)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:  # type: ignore[override]
        self.axis = axis
        self.splits = np.cumsum([array.shape[axis] for array in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


def concat(tensors: t.Sequence[Operand], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: t.Sequence[Operand], axis: int = 0) -> Tensor:
    expanded = []
    for value in tensors:
        tensor = as_tensor(value)
        shape = list(tensor.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(tensor.reshape(tuple(shape)))
    return concat(expanded, axis=axis)
