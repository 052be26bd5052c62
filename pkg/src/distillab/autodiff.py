"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built define-by-run: every primitive records its parents and a
VJP closure on the output tensor. VJP closures are written in terms of the
same primitives, so running a backward pass with ``create_graph=True`` records
a differentiable graph of the gradient itself. That is what makes
meta-gradients (gradients of losses that depend on inner gradients) and exact
Hessian-vector products possible without any special casing.

Conventions:
  * all values are float64, row-major,
  * every op validates that its result is finite and raises otherwise,
  * tensors and the graphs they belong to are confined to a single thread;
    independent graphs may live on independent threads.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for errors raised by the tensor engine."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(AutodiffError):
    """An operation produced NaN or Inf values."""


class GradError(AutodiffError):
    """A gradient request cannot be satisfied (non-scalar loss, unused or
    non-differentiable input, dimension mismatch)."""


# recording state is per-thread: graphs are thread-confined, and one thread's
# backward pass must not stop another thread's forward pass from recording
class _State(threading.local):
    enabled = True


_STATE = _State()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (current thread only)."""
    prev = _STATE.enabled
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


@contextlib.contextmanager
def _recording(enabled: bool):
    prev = _STATE.enabled
    _STATE.enabled = enabled
    try:
        yield
    finally:
        _STATE.enabled = prev


def _check_finite(op: str, arr: np.ndarray) -> None:
    # a single fused reduction: any NaN propagates and any Inf saturates, so a
    # finite sum proves a finite array (overflow of a finite sum only occurs
    # at magnitudes where the computation is already lost)
    with np.errstate(all="ignore"):
        if not np.isfinite(np.sum(arr)):
            if np.all(np.isfinite(arr)):
                return
            raise NonFiniteError(f"{op}: result contains NaN or Inf")


class Tensor:
    """A dense float64 array participating in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite("tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable requires_grad leaf.

        The tensor must be scalar. Leaf gradients are overwritten, not
        accumulated across calls.
        """
        if self.size != 1:
            raise GradError(f"backward: loss must be scalar, got shape {self.shape}")
        leaves = [t for t in Graph(self).nodes if t._vjp is None and t.requires_grad]
        for leaf, g in zip(leaves, grad(self, leaves, allow_unused=True)):
            if g is not None:
                leaf.grad = g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(
    op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, check: bool = False
) -> Tensor:
    # only ops that can create NaN/Inf from finite inputs pay for the check;
    # overflow in linear ops surfaces at the next exp/log/pow or at a module
    # boundary (training loss, meta-gradient update, hvp output)
    if check:
        _check_finite(op, data)
    track = _STATE.enabled and (
        parents[0].requires_grad or (len(parents) > 1 and parents[1].requires_grad)
    )
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    if track:
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    else:
        out._parents = ()
        out._vjp = None
        out._op = None
    return out


class Graph:
    """Reverse-topological view of the recorded operations reaching a root.

    ``nodes`` is topologically ordered (parents before children); a backward
    pass walks it once in reverse.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _topo(root)

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t._vjp is None and t.requires_grad]


def _topo(root: Tensor, stop_ids: frozenset[int] = frozenset()) -> list[Tensor]:
    """Topological order of the requires_grad subgraph under root.

    Nodes whose id is in stop_ids are included but not expanded: gradients
    below a requested input are never needed, and skipping them keeps repeated
    differentiation of an unrolled loop linear in its length.
    """
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
        if id(node) in stop_ids:
            continue
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Tensor | Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
):
    """Differentiate a scalar ``output`` with respect to ``inputs``.

    With ``create_graph=True`` the returned gradients carry their own recorded
    graph and can be differentiated again. An input that the output does not
    depend on differentiably raises ``GradError`` unless ``allow_unused`` is
    set (in which case its entry is None): silent zeros would mask a
    non-differentiable recording.
    """
    single = isinstance(inputs, Tensor)
    wanted: list[Tensor] = [inputs] if single else list(inputs)
    if output.size != 1:
        raise GradError(f"grad: output must be scalar, got shape {output.shape}")
    for t in wanted:
        if not t.requires_grad:
            raise GradError("grad: input tensor does not require grad")

    wanted_ids = frozenset(id(t) for t in wanted)
    # Pruning the walk below a requested input is only sound when there is no
    # second requested input that might sit deeper in the graph.
    stop_ids = wanted_ids if len(wanted) == 1 else frozenset()
    cot: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    if output.requires_grad:
        remaining = set(wanted_ids)
        with _recording(create_graph):
            for node in reversed(_topo(output, stop_ids=stop_ids)):
                if id(node) in remaining:
                    # cotangent complete: every consumer was already processed
                    remaining.discard(id(node))
                    if not remaining:
                        break
                    if id(node) in stop_ids:
                        continue
                g = cot.get(id(node))
                if g is None or node._vjp is None:
                    continue
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    pid = id(parent)
                    held = cot.get(pid)
                    cot[pid] = pg if held is None else add(held, pg)

    results: list[Tensor | None] = []
    for t in wanted:
        g = cot.get(id(t))
        if g is None:
            if not allow_unused:
                raise GradError(
                    "grad: output does not depend differentiably on an input "
                    "(was an inner gradient recorded without create_graph?)"
                )
            results.append(None)
        else:
            results.append(g)
    return results[0] if single else results


# ---------------------------------------------------------------------------
# primitives


def _reduce_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    try:
        data = np.add(a.data, b.data)
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("add", data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    try:
        data = np.subtract(a.data, b.data)
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(mul(g, -1.0), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("sub", data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    try:
        data = np.multiply(a.data, b.data)
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = _reduce_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = _reduce_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", data, (a, b), vjp)


def div(a, b) -> Tensor:
    return mul(a, pow_const(b, -1.0))


def _fast_pow(x: np.ndarray, c: float) -> np.ndarray:
    # libm pow is ~20x a multiply; special-case the exponents the library uses
    if c == 2.0:
        return x * x
    if c == 1.0:
        return x.copy()
    if c == 0.5:
        return np.sqrt(x)
    if c == -0.5:
        return 1.0 / np.sqrt(x)
    if c == -1.0:
        return 1.0 / x
    if c == -2.0:
        return 1.0 / (x * x)
    return x**c


def pow_const(a, exponent: float) -> Tensor:
    """Elementwise power with a constant (non-differentiated) exponent."""
    a = _tensor(a)
    c = float(exponent)
    with np.errstate(all="ignore"):
        data = _fast_pow(a.data, c)

    def vjp(g):
        return (mul(mul(g, c), pow_const(a, c - 1.0)),)

    return _make("pow", data, (a,), vjp, check=True)


def texp(a) -> Tensor:
    a = _tensor(a)
    with np.errstate(all="ignore"):
        data = np.exp(a.data)

    def vjp(g):
        # recomputing exp keeps the graph acyclic (a closure referencing its
        # own output node would leak every unrolled graph until a gc cycle
        # pass) while staying differentiable for higher orders
        return (mul(g, texp(a)),)

    return _make("exp", data, (a,), vjp, check=True)


def tlog(a) -> Tensor:
    a = _tensor(a)

    def vjp(g):
        return (mul(g, pow_const(a, -1.0)),)

    with np.errstate(all="ignore"):
        data = np.log(a.data)
    return _make("log", data, (a,), vjp, check=True)


def relu(a) -> Tensor:
    a = _tensor(a)
    mask = (a.data > 0.0).astype(np.float64)

    def vjp(g):
        return (mul(g, Tensor(mask)),)

    return _make("relu", a.data * mask, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    with np.errstate(all="ignore"):
        data = a.data @ b.data

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make("matmul", data, (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = _tensor(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def vjp(g):
        return (reshape(g, a.shape),)

    return _make("reshape", data, (a,), vjp)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(int(i) for i in np.argsort(axes))

    def vjp(g):
        return (transpose(g, inverse),)

    return _make("transpose", a.data.transpose(axes), (a,), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _tensor(a)
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    in_shape = a.shape
    if axis is None:
        kept = (1,) * len(in_shape)
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        ax = tuple(i % len(in_shape) for i in ax)
        kept = tuple(1 if i in ax else d for i, d in enumerate(in_shape))

    def vjp(g):
        if g.shape != kept:
            g = reshape(g, kept)
        return (broadcast_to(g, in_shape),)

    return _make("sum", data, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    """Mean as a primitive: one pass forward, one broadcast backward."""
    a = _tensor(a)
    data = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    in_shape = a.shape
    count = a.size // max(data.size, 1)
    if axis is None:
        kept = (1,) * len(in_shape)
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        ax = tuple(i % len(in_shape) for i in ax)
        kept = tuple(1 if i in ax else d for i, d in enumerate(in_shape))

    def vjp(g):
        g = mul(g, 1.0 / count)
        if g.shape != kept:
            g = reshape(g, kept)
        return (broadcast_to(g, in_shape),)

    return _make("mean", data, (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = _tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None

    def vjp(g):
        return (_reduce_to(g, a.shape),)

    return _make("broadcast_to", data, (a,), vjp)


def slice1d(a, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-D tensor."""
    a = _tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"slice1d: expected 1-D tensor, got shape {a.shape}")
    n = a.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice1d: range [{start}, {stop}) out of bounds for shape {a.shape}")

    def vjp(g):
        return (embed1d(g, start, n),)

    return _make("slice1d", a.data[start:stop].copy(), (a,), vjp)


def embed1d(a, start: int, length: int) -> Tensor:
    """Place a 1-D tensor into a zero vector of the given length."""
    a = _tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"embed1d: expected 1-D tensor, got shape {a.shape}")
    if start < 0 or start + a.shape[0] > length:
        raise ShapeError(f"embed1d: segment [{start}, {start + a.shape[0]}) exceeds length {length}")
    data = np.zeros(length, dtype=np.float64)
    data[start : start + a.shape[0]] = a.data
    lo, hi = start, start + a.shape[0]

    def vjp(g):
        return (slice1d(g, lo, hi),)

    return _make("embed1d", data, (a,), vjp)


def _conv_geometry(op, h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > w + 2 * padding or ho < 1 or wo < 1:
        raise ShapeError(
            f"{op}: kernel ({kh}, {kw}) with stride {stride}, padding {padding} "
            f"does not fit input of spatial shape ({h}, {w})"
        )
    return ho, wo


def unfold(x, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Extract sliding (kh, kw) patches: (N, C, H, W) -> (N, C, kh*kw, L)."""
    x = _tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"unfold: expected 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    ho, wo = _conv_geometry("unfold", h, w, kh, kw, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    data = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c, kh * kw, ho * wo)

    def vjp(g):
        return (fold(g, h, w, kh, kw, stride, padding),)

    return _make("unfold", data, (x,), vjp)


def fold(cols, h: int, w: int, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of unfold: scatter-add (N, C, kh*kw, L) patches back to (N, C, h, w)."""
    cols = _tensor(cols)
    if cols.ndim != 4 or cols.shape[2] != kh * kw:
        raise ShapeError(f"fold: expected (N, C, {kh * kw}, L) input, got shape {cols.shape}")
    n, c, _, l = cols.shape
    ho, wo = _conv_geometry("fold", h, w, kh, kw, stride, padding)
    if l != ho * wo:
        raise ShapeError(f"fold: got {l} patch positions, geometry implies {ho * wo}")
    patches = cols.data.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(kh):
        rows = slice(i, i + (ho - 1) * stride + 1, stride)
        for j in range(kw):
            out[:, :, rows, j : j + (wo - 1) * stride + 1 : stride] += patches[:, :, i, j]
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w].copy()

    def vjp(g):
        return (unfold(g, kh, kw, stride, padding),)

    return _make("fold", out, (cols,), vjp)


def unfold_matrix(x, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Patch matrix in matmul layout: (N, C, H, W) -> (C*kh*kw, N*L)."""
    x = _tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"unfold_matrix: expected 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    ho, wo = _conv_geometry("unfold_matrix", h, w, kh, kw, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    data = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)

    def vjp(g):
        return (fold_matrix(g, n, h, w, kh, kw, stride, padding),)

    return _make("unfold_matrix", data, (x,), vjp)


def fold_matrix(cols, n: int, h: int, w: int, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of unfold_matrix: scatter-add (C*kh*kw, N*L) back to (N, C, h, w)."""
    cols = _tensor(cols)
    ho, wo = _conv_geometry("fold_matrix", h, w, kh, kw, stride, padding)
    if cols.ndim != 2 or cols.shape[0] % (kh * kw) != 0 or cols.shape[1] != n * ho * wo:
        raise ShapeError(f"fold_matrix: got shape {cols.shape}, geometry implies (C*{kh * kw}, {n * ho * wo})")
    c = cols.shape[0] // (kh * kw)
    patches = cols.data.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(kh):
        rows = slice(i, i + (ho - 1) * stride + 1, stride)
        for j in range(kw):
            out[:, :, rows, j : j + (wo - 1) * stride + 1 : stride] += patches[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w].copy()

    def vjp(g):
        return (unfold_matrix(g, kh, kw, stride, padding),)

    return _make("fold_matrix", out, (cols,), vjp)


# ---------------------------------------------------------------------------
# composites (differentiable to arbitrary order because they are built from
# the primitives above)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return tmean(a, axis=axis, keepdims=keepdims)


def square(a) -> Tensor:
    return pow_const(a, 2.0)


def sqrt(a) -> Tensor:
    return pow_const(a, 0.5)


def dot(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    return tsum(mul(a, b))


def norm(a, eps: float = 0.0) -> Tensor:
    """Euclidean norm of the flattened tensor; eps regularizes at zero."""
    s = tsum(square(_tensor(a)))
    if eps:
        s = add(s, eps)
    return sqrt(s)


def flatten(a) -> Tensor:
    a = _tensor(a)
    n = a.shape[0]
    return reshape(a, (n, a.size // n))


def onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    eye = np.zeros((labels.size, num_classes), dtype=np.float64)
    eye[np.arange(labels.size), labels] = 1.0
    return eye


def log_softmax(logits) -> Tensor:
    logits = _tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"log_softmax: expected (batch, classes), got shape {logits.shape}")
    # constant shift for stability; exact no-op for value and gradient
    shift = sub(logits, Tensor(logits.data.max(axis=1, keepdims=True)))
    lse = tlog(tsum(texp(shift), axis=1, keepdims=True))
    return sub(shift, lse)


def softmax_cross_entropy(logits, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Cross-entropy of logits against integer class labels."""
    logits = _tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: incompatible shapes {logits.shape} and {labels.shape}"
        )
    target = Tensor(onehot(labels, logits.shape[1]))
    per_example = mul(tsum(mul(log_softmax(logits), target), axis=1), -1.0)
    if reduction == "none":
        return per_example
    if reduction == "mean":
        return mean(per_example)
    if reduction == "sum":
        return tsum(per_example)
    raise ValueError(f"unknown reduction {reduction!r}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (N, Cin, H, W) with (Cout, Cin, kh, kw)."""
    x, weight = _tensor(x), _tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D operands, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {weight.shape}")
    ho, wo = _conv_geometry("conv2d", h, w, kh, kw, stride, padding)
    cols = unfold_matrix(x, kh, kw, stride, padding)  # (Cin*K, N*L)
    wmat = reshape(weight, (cout, cin * kh * kw))
    out = transpose(reshape(matmul(wmat, cols), (cout, n, ho, wo)), (1, 0, 2, 3))
    if bias is not None:
        bias = _tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} filters")
        out = add(out, reshape(bias, (1, cout, 1, 1)))
    return out


def avg_pool2d(x, kernel: int = 2, stride: int | None = None) -> Tensor:
    x = _tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected 4-D input, got shape {x.shape}")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    ho, wo = _conv_geometry("avg_pool2d", h, w, kernel, kernel, stride, 0)
    cols = unfold(x, kernel, kernel, stride, 0)  # (N, C, k*k, L)
    return reshape(mean(cols, axis=2), (n, c, ho, wo))


def instance_norm(x, eps: float = 1e-8) -> Tensor:
    """Normalize each (sample, channel) feature map to zero mean, unit variance."""
    x = _tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: expected 4-D input, got shape {x.shape}")
    centered = sub(x, tmean(x, axis=(2, 3), keepdims=True))
    var = tmean(mul(centered, centered), axis=(2, 3), keepdims=True)
    return mul(centered, pow_const(add(var, eps), -0.5))


# ---------------------------------------------------------------------------
# second-order helpers


def hvp(
    loss_fn: Callable[[Tensor], Tensor],
    params: np.ndarray,
    v: np.ndarray,
    mode: str = "exact",
    fd_eps_scale: float = 1e-4,
) -> np.ndarray:
    """Hessian-vector product of a scalar loss at a flat parameter vector.

    ``mode="exact"`` differentiates the gradient a second time;
    ``mode="fd"`` uses central finite differences of the gradient with step
    eps = fd_eps_scale * (1 + max|params|).
    """
    params = np.asarray(params, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if params.ndim != 1 or v.shape != params.shape:
        raise GradError(f"hvp: vector shape {v.shape} does not match parameters {params.shape}")
    if mode == "exact":
        theta = Tensor(params, requires_grad=True)
        g = grad(loss_fn(theta), theta, create_graph=True)
        out = grad(dot(g, Tensor(v)), theta).data
        _check_finite("hvp", out)
        return out
    if mode == "fd":
        eps = fd_eps_scale * (1.0 + float(np.max(np.abs(params), initial=0.0)))

        def g_at(p):
            t = Tensor(p, requires_grad=True)
            return grad(loss_fn(t), t).data

        out = (g_at(params + eps * v) - g_at(params - eps * v)) / (2.0 * eps)
        _check_finite("hvp", out)
        return out
    raise ValueError(f"unknown hvp mode {mode!r}")


def make_hvp_operator(
    loss_fn: Callable[[Tensor], Tensor], params: np.ndarray, mode: str = "exact"
) -> Callable[[np.ndarray], np.ndarray]:
    """Return v -> H v at fixed parameters, reusing one recorded gradient graph."""
    params = np.asarray(params, dtype=np.float64)
    if mode == "exact":
        theta = Tensor(params, requires_grad=True)
        g = grad(loss_fn(theta), theta, create_graph=True)

        def apply(v: np.ndarray) -> np.ndarray:
            v = np.asarray(v, dtype=np.float64)
            if v.shape != params.shape:
                raise GradError(f"hvp: vector shape {v.shape} does not match parameters {params.shape}")
            return grad(dot(g, Tensor(v)), theta).data

        return apply
    if mode == "fd":
        return lambda v: hvp(loss_fn, params, v, mode="fd")
    raise ValueError(f"unknown hvp mode {mode!r}")
