"""Dense tensors with reverse-mode automatic differentiation.

Storage is a numpy array in row-major order; volumetric feature maps use the
``[batch, D, H, W, C]`` layout with channels fastest.  Each differentiable op
returns a new :class:`Tensor` that remembers its parents and a closure mapping
the upstream gradient to one gradient per parent.  :meth:`Tensor.backward`
walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float32
_DEBUG = False
_local = threading.local()


def default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (e.g. to float64 for gradient checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug(flag: bool) -> None:
    """Enable finiteness checks after every op."""
    global _DEBUG
    _DEBUG = bool(flag)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """N-dimensional array with an optional gradient and graph linkage.

    The graph node is stored inline: ``_op`` names the producing op,
    ``_parents`` holds its inputs and ``_backward`` maps the output gradient
    to a tuple of parent gradients (``None`` where no gradient flows).
    Float arrays keep their dtype; lists, scalars and integer arrays take the
    default dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        is_array = isinstance(data, np.ndarray)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f" or not is_array:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""

    # --- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # --- autograd -----------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every tensor reachable from this one.

        Only scalar outputs may be differentiated without an explicit seed
        gradient.  Gradients accumulate additively into existing ``.grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() requires a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")

        order = _topological_order(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise ShapeError(
                        f"internal: op {node._op} produced grad {g.shape} for input {parent.shape}"
                    )
                parent.grad = g if parent.grad is None else parent.grad + g

    # --- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return mean(self)


def _topological_order(root: Tensor) -> list:
    order: list = []
    visited: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op``, recording graph linkage when needed."""
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# --- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum of equal-shape tensors (or a tensor and a scalar)."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = b
        return make_result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = b
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


# --- reductions and shape ----------------------------------------------------


def tensor_sum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return make_result(
        np.asarray(a.data.sum(), dtype=dtype),
        (a,),
        lambda g: (np.broadcast_to(g, shape).astype(dtype, copy=True),),
        "sum",
    )


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape, dtype = a.shape, a.dtype
    return make_result(
        np.asarray(a.data.mean(), dtype=dtype),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=dtype),),
        "mean",
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {orig} as {shape}") from exc
    return make_result(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return make_result(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes"
    )


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(a, -1, -2)


# --- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``[..., M, K] @ [..., K, N]``; leading batch dims must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward, "matmul")


def softmax_array(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    y = softmax_array(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


# --- gradient checking -------------------------------------------------------


def finite_difference_check(
    fn: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    sample: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    probe: Optional[Callable[[], contextlib.AbstractContextManager]] = None,
    stats: Optional[dict] = None,
) -> float:
    """Compare the analytic gradient of scalar ``fn(x)`` with central differences.

    Returns ``max |analytic - cd| / max(|analytic|, |cd|, 1e-8)`` over the
    checked elements.  ``x`` is perturbed in place, so ``fn`` may ignore its
    argument and read ``x`` through a closure (useful for network parameters).
    With ``sample`` set, only that many randomly chosen elements are checked.

    ``probe`` is an optional context-manager factory yielding a list that the
    forward pass fills with arrays (for example :func:`nlunet.nn.kink_sides`).
    An element is skipped when either perturbed evaluation fills it with
    different arrays than the unperturbed one, i.e. when the ``+-eps`` step
    crosses a point where ``fn`` is not differentiable.  The number of skipped
    elements is stored in ``stats["skipped"]`` when ``stats`` is given.
    """
    probe = probe or _null_probe

    def evaluate():
        with probe() as seen:
            out = fn(x)
        return out, seen

    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    out, base = evaluate()
    if out.size != 1:
        raise ContractError(f"finite_difference_check: fn must return a scalar, got {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    if sample is not None and sample < flat.size:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(flat.size, size=sample, replace=False)
    else:
        indices = range(flat.size)

    worst = 0.0
    skipped = 0
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus, seen_plus = evaluate()
            flat[i] = orig - eps
            f_minus, seen_minus = evaluate()
            flat[i] = orig
            if not (_same_arrays(base, seen_plus) and _same_arrays(base, seen_minus)):
                skipped += 1
                continue
            f_plus, f_minus = float(f_plus.data), float(f_minus.data)
            cd = (f_plus - f_minus) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    x.grad = None
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return worst


@contextlib.contextmanager
def _null_probe() -> Iterator[list]:
    yield []


def _same_arrays(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))
