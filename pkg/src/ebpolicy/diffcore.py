"""Dense float64 tensors with reverse-mode differentiation.

Small autodiff engine built on numpy arrays. Backward passes executed with
``create_graph=True`` re-record their own primitives, so gradients of
gradients (reverse-over-reverse) work to arbitrary depth. All kernels are
deterministic; everything is float64.
"""

from __future__ import annotations

import threading
import warnings

import numpy as np


class DiffcoreError(ValueError):
    """Shape mismatch, non-scalar differentiation target, or non-finite values."""


_state = threading.local()


def _is_recording() -> bool:
    return getattr(_state, "recording", True)


class _Recording:
    """Context manager that sets the thread-local graph-recording flag."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.prev = True

    def __enter__(self):
        self.prev = _is_recording()
        _state.recording = self.enabled
        return self

    def __exit__(self, *exc):
        _state.recording = self.prev
        return False


def no_grad() -> _Recording:
    """Disable graph recording inside a ``with`` block."""
    return _Recording(False)


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop.

    ``grad`` is populated by :func:`backward`; :func:`grad` returns gradients
    directly without touching it. Leaf tensors have no parents.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DiffcoreError("non-finite values in tensor constructor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"

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
        if self.data.size != 1:
            raise DiffcoreError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values, cut from the graph."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.shape})"

    # arithmetic sugar; scalars and arrays are auto-wrapped
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return take(self, key)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, out_data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Build a result tensor, attaching graph edges when recording is on."""
    if not np.all(np.isfinite(out_data)):
        raise DiffcoreError(f"non-finite result in op {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    if _is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        out._op = op
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast gradient back down to ``shape`` (recorded ops)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = reduce_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(u):
        return _unbroadcast(u, a.shape), _unbroadcast(u, b.shape)

    return _node("add", out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(u):
        return _unbroadcast(u, a.shape), _unbroadcast(neg(u), b.shape)

    return _node("sub", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _node("neg", -a.data, (a,), lambda u: (neg(u),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(u):
        return _unbroadcast(mul(u, b), a.shape), _unbroadcast(mul(u, a), b.shape)

    return _node("mul", out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(u):
        ga = div(u, b)
        gb = neg(div(mul(u, a), mul(b, b)))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node("div", out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DiffcoreError(f"matmul expects ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DiffcoreError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(u):
        ga = matmul(u, transpose(b, -1, -2))
        gb = matmul(transpose(a, -1, -2), u)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node("matmul", out, (a, b), vjp)


def exp(a: Tensor) -> Tensor:
    out = _node("exp", np.exp(a.data), (a,), None)
    if out.requires_grad:
        out._vjp = lambda u: (mul(u, out),)
    return out


def log(a: Tensor) -> Tensor:
    return _node("log", np.log(a.data), (a,), lambda u: (div(u, a),))


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    out = _node("tanh", out_data, (a,), None)
    if out.requires_grad:
        out._vjp = lambda u: (mul(u, sub(Tensor(1.0), mul(out, out))),)
    return out


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    out = _node("sqrt", out_data, (a,), None)
    if out.requires_grad:
        out._vjp = lambda u: (div(mul(u, Tensor(0.5)), out),)
    return out


def pow_const(a: Tensor, p: float) -> Tensor:
    out = a.data ** p

    def vjp(u):
        return (mul(u, mul(Tensor(p), pow_const(a, p - 1.0))),)

    return _node("pow", out, (a,), vjp)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(u):
        if axis is None:
            shaped = reshape(u, (1,) * a.ndim)
        elif keepdims:
            shaped = u
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(i % a.ndim for i in ax)
            kshape = tuple(1 if i in ax else n for i, n in enumerate(a.shape))
            shaped = reshape(u, kshape)
        return (broadcast_to(shaped, a.shape),)

    return _node("sum", out, (a,), vjp)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for i in ax:
            count *= a.shape[i % a.ndim]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()

    def vjp(u):
        return (_unbroadcast(u, a.shape),)

    return _node("broadcast", out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def vjp(u):
        return (reshape(u, a.shape),)

    return _node("reshape", out, (a,), vjp)


def transpose(a: Tensor, ax1: int = -1, ax2: int = -2) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)

    def vjp(u):
        return (transpose(u, ax1, ax2),)

    return _node("transpose", out, (a,), vjp)


def concatenate(parts: list[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(u):
        grads = []
        for i in range(len(parts)):
            key = [slice(None)] * u.ndim
            key[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(take(u, tuple(key)))
        return tuple(grads)

    return _node("concat", out, tuple(parts), vjp)


def take(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def vjp(u):
        return (scatter(u, key, a.shape),)

    return _node("take", out, (a,), vjp)


def scatter(u: Tensor, key, shape: tuple[int, ...]) -> Tensor:
    out = np.zeros(shape, dtype=np.float64)
    out[key] = u.data

    def vjp(v):
        return (take(v, key),)

    return _node("scatter", out, (u,), vjp)


def amax_detached(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max over an axis, detached from the graph (used for softmax shifts)."""
    return Tensor(np.max(a.data, axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------------------
# composites


def rms_normalize(a: Tensor, eps: float = 1e-6, axis: int = -1) -> Tensor:
    """x / sqrt(mean(x^2) + eps) over ``axis``; no learnable gain."""
    ms = reduce_mean(mul(a, a), axis=axis, keepdims=True)
    return div(a, sqrt(add(ms, Tensor(eps))))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = sub(a, amax_detached(a, axis=axis, keepdims=True))
    e = exp(shifted)
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation gelu; smooth, so finite-difference checks stay tight."""
    c = float(np.sqrt(2.0 / np.pi))
    inner = mul(Tensor(c), add(a, mul(Tensor(0.044715), mul(a, mul(a, a)))))
    return mul(mul(Tensor(0.5), a), add(Tensor(1.0), tanh(inner)))


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return reduce_mean(mul(d, d))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return reduce_sum(mul(a, b))


# ---------------------------------------------------------------------------
# graphs and differentiation


class ComputeGraph:
    """Topologically ordered view of the nodes reachable backward from a root."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._collect(root)

    @staticmethod
    def _collect(root: Tensor) -> list[Tensor]:
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order  # parents before children

    def order(self, rng: np.random.Generator | None = None) -> list[Tensor]:
        """A valid topological order; a random one when ``rng`` is given."""
        if rng is None:
            return list(self.nodes)
        children: dict[int, list[Tensor]] = {id(n): [] for n in self.nodes}
        indeg: dict[int, int] = {id(n): 0 for n in self.nodes}
        in_graph = set(indeg)
        for n in self.nodes:
            for p in n._parents:
                if id(p) in in_graph:
                    children[id(p)].append(n)
                    indeg[id(n)] += 1
        ready = [n for n in self.nodes if indeg[id(n)] == 0]
        out: list[Tensor] = []
        while ready:
            i = int(rng.integers(len(ready)))
            node = ready.pop(i)
            out.append(node)
            for ch in children[id(node)]:
                indeg[id(ch)] -= 1
                if indeg[id(ch)] == 0:
                    ready.append(ch)
        return out


def grad(
    output: Tensor,
    wrt: list[Tensor] | tuple[Tensor, ...],
    create_graph: bool = False,
    graph_order: list[Tensor] | None = None,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    With ``create_graph`` the returned tensors carry their own graphs, so
    expressions containing them can be differentiated again. Tensors in
    ``wrt`` that the output does not depend on get a zero gradient and a
    warning. ``graph_order`` overrides the traversal order (must be a valid
    topological order of the output's graph).
    """
    if output.data.size != 1:
        raise DiffcoreError(f"grad target must be scalar, got shape {output.shape}")
    wrt = list(wrt)
    order = graph_order if graph_order is not None else ComputeGraph(output).nodes
    in_graph = {id(n) for n in order}

    # mark nodes that lie on a path from some wrt tensor to the output
    wrt_ids = {id(w) for w in wrt}
    needed: set[int] = set()
    for n in order:  # parents precede children
        if id(n) in wrt_ids or any(id(p) in needed for p in n._parents):
            needed.add(id(n))

    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    results: list[Tensor] = []
    with _Recording(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad or id(p) not in needed:
                    continue
                if id(p) in grads:
                    grads[id(p)] = add(grads[id(p)], pg)
                else:
                    grads[id(p)] = pg

        for w in wrt:
            g = grads.get(id(w))
            if g is None:
                if id(w) not in in_graph:
                    warnings.warn("grad target unreachable from output; returning zeros")
                results.append(Tensor(np.zeros_like(w.data)))
            else:
                if g.data.shape != w.data.shape:
                    g = reshape(g, w.data.shape)
                results.append(g)
    return results


def backward(output: Tensor, wrt: list[Tensor]) -> None:
    """Accumulate ``d output / d wrt`` into each tensor's ``.grad``."""
    gs = grad(output, wrt)
    for w, g in zip(wrt, gs):
        if w.grad is None:
            w.grad = g.data.copy()
        else:
            w.grad = w.grad + g.data


def check_grad(f, point: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and may itself call :func:`grad`
    internally (with ``create_graph=True``), so this doubles as the
    second-order oracle. Relative error per coordinate is
    ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    x = Tensor(point.data.copy(), requires_grad=True)
    out = f(x)
    if out.data.size != 1:
        raise DiffcoreError("check_grad target must be scalar")
    analytic = grad(out, [x])[0].data

    flat = point.data.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            shifted = flat.copy()
            shifted[i] += sign * eps
            val = f(Tensor(shifted.reshape(point.data.shape))).item()
            if not np.isfinite(val):
                raise DiffcoreError(f"non-finite evaluation at coordinate {i}")
            numeric[i] += sign * val
        numeric[i] /= 2.0 * eps

    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / (np.abs(a) + np.abs(numeric) + 1e-12)
    return float(np.max(rel)) if rel.size else 0.0
