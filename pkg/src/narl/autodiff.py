"""Dense float64 tensors with a reverse-mode differentiation tape.

The tape supports differentiating through its own backward pass
(``create_graph=True``), which is what the one-step-lookahead
hypergradient needs: gradients of a meta objective with respect to
parameters that only enter through an inner gradient step.

Conventions
-----------
- Tensors are immutable after creation; parameter updates build new leaves.
- Shapes must match exactly; the only implicit broadcast is scalar-tensor.
- relu uses subgradient 0 at 0; max breaks ties toward the lowest index.
- A tape is single-threaded. Distinct threads may run distinct tapes.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericalError, ShapeError

_uid = itertools.count()
_STATE = threading.local()


def _state():
    if not hasattr(_STATE, "tapes"):
        _STATE.tapes = []
        _STATE.grad_off = 0
    return _STATE


def _active_tape():
    st = _state()
    if st.grad_off or not st.tapes:
        return None
    return st.tapes[-1]


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    st = _state()
    st.grad_off += 1
    try:
        yield
    finally:
        st.grad_off -= 1


class Tape:
    """Recording context. Nodes append in creation order, so every node's
    inputs have strictly smaller ids than the node itself."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc):
        popped = _state().tapes.pop()
        assert popped is self
        return False


class Tensor:
    """Immutable dense float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "uid", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.uid = next(_uid)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op = "leaf" if requires_grad else "const"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def _tracked(self) -> bool:
        return self.requires_grad or self._vjp is not None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op})"

    # operator sugar; all dispatch to the module-level ops
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

    def __pow__(self, p):
        if isinstance(p, Tensor):
            return tpow(self, p)
        return cpow(self, float(p))

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis: int | None = None):
        return tsum(self, axis)

    def mean(self, axis: int | None = None):
        return tmean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable,
          op: str) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p._tracked() for p in parents):
        out._parents = parents
        out._vjp = vjp
        out._op = op
        tape.nodes.append(out)
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Collapse a gradient onto a scalar operand of a broadcast op."""
    if g.shape == shape:
        return g
    return reshape(tsum(g, None), shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
                 "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape),
                            _reduce_to(neg(g), b.shape)),
                 "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(mul(g, b), a.shape),
                            _reduce_to(mul(g, a), b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    return _make(a.data / b.data, (a, b),
                 lambda g: (_reduce_to(div(g, b), a.shape),
                            _reduce_to(neg(div(mul(g, a), mul(b, b))),
                                       b.shape)),
                 "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
                 "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


# --------------------------------------------------------------- activations

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(np.maximum(a.data, 0.0), (a,),
                 lambda g: (mul(g, mask),), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _make(1.0 / (1.0 + np.exp(-a.data)), (a,), None, "sigmoid")
    if out._op == "sigmoid":  # recorded
        out._vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), None, "exp")
    if out._op == "exp":
        out._vjp = lambda g: (mul(g, out),)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def cpow(a, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    if p != int(p) and np.any(a.data < 0.0):
        raise DomainError(f"pow: negative base with non-integer exponent {p}")
    if p < 0 and np.any(a.data == 0.0):
        raise DomainError(f"pow: zero base with negative exponent {p}")

    def vjp(g):
        if p == 0.0:
            return (mul(g, 0.0),)
        return (mul(mul(g, p), cpow(a, p - 1.0)),)

    return _make(np.power(a.data, p), (a,), vjp, "cpow")


def tpow(a, q) -> Tensor:
    """Elementwise a**q with a tensor exponent; both operands differentiable.

    Requires a >= 0. At a == 0 the exponent gradient is 0 (the true limit for
    q > 0) and the base gradient is evaluated against a tiny floor, so a zero
    base never produces NaN.
    """
    a, q = as_tensor(a), as_tensor(q)
    _binary_shapes(a, q, "tpow")
    if np.any(a.data < 0.0):
        raise DomainError("tpow: negative base")
    ab, qb = np.broadcast_arrays(a.data, q.data)
    if np.any((ab == 0.0) & (qb <= 0.0)):
        raise DomainError("tpow: zero base with non-positive exponent")
    out = _make(np.power(a.data, q.data), (a, q), None, "tpow")
    if out._op == "tpow":
        floored = Tensor(np.maximum(a.data, 1e-300))

        def vjp(g):
            ga = _reduce_to(mul(mul(g, q), tpow(floored, sub(q, 1.0))), a.shape)
            gq = _reduce_to(mul(mul(g, out), log(floored)), q.shape)
            return (ga, gq)

        out._vjp = vjp
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 inside the (closed) interval, 0 outside."""
    a = as_tensor(a)
    mask = Tensor(((a.data >= lo) & (a.data <= hi)).astype(np.float64))
    return _make(np.clip(a.data, lo, hi), (a,),
                 lambda g: (mul(g, mask),), "clamp")


# ---------------------------------------------------------------- reductions

def _keepdims_shape(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    s = list(shape)
    s[axis] = 1
    return tuple(s)


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        shape = a.shape

        def vjp(g):
            return (broadcast_to(reshape(g, (1,) * len(shape)), shape)
                    if shape else g,)

        return _make(np.sum(a.data), (a,), vjp, "sum")
    kshape = _keepdims_shape(a.shape, axis)
    return _make(np.sum(a.data, axis=axis), (a,),
                 lambda g: (broadcast_to(reshape(g, kshape), a.shape),),
                 "sum")


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return div(tsum(a, axis), float(n))


def tmax(a, axis: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Max with index. Ties resolve to the lowest index; the gradient flows
    only to the selected entries."""
    a = as_tensor(a)
    if axis is None:
        idx = int(np.argmax(a.data))
        mask = np.zeros(a.shape)
        mask.reshape(-1)[idx] = 1.0
        maskt = Tensor(mask)
        out = _make(np.max(a.data), (a,),
                    lambda g: (mul(broadcast_to(reshape(g, (1,) * a.data.ndim),
                                                a.shape), maskt),),
                    "max")
        return out, np.asarray(idx)
    idx = np.argmax(a.data, axis=axis)
    mask = np.zeros(a.shape)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
    maskt = Tensor(mask)
    kshape = _keepdims_shape(a.shape, axis)
    out = _make(np.max(a.data, axis=axis), (a,),
                lambda g: (mul(broadcast_to(reshape(g, kshape), a.shape),
                               maskt),),
                "max")
    return out, idx


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax with the usual max-shift for stability."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = _make(e / np.sum(e, axis=axis, keepdims=True), (a,), None, "softmax")
    if out._op == "softmax":
        ax = axis if axis >= 0 else a.data.ndim + axis
        kshape = _keepdims_shape(a.shape, ax)

        def vjp(g):
            gs = mul(g, out)
            inner = broadcast_to(reshape(tsum(gs, ax), kshape), a.shape)
            return (mul(out, sub(g, inner)),)

        out._vjp = vjp
    return out


# ------------------------------------------------------------ shape plumbing

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape {a.shape} -> {shape}")
    old = a.shape
    return _make(a.data.reshape(shape), (a,),
                 lambda g: (reshape(g, old),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast; the adjoint sums over the expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast {a.shape} -> {shape}") from e
    old = a.shape
    pad = len(shape) - len(old)
    axes = tuple(i for i in range(len(shape))
                 if i < pad or old[i - pad] != shape[i])

    def vjp(g):
        out = g
        for ax in sorted(axes, reverse=True):
            out = tsum(out, ax)
        return (reshape(out, old),)

    return _make(data, (a,), vjp, "broadcast")


def pick(a, idx) -> Tensor:
    """Row-wise gather: a[i, idx[i]] for a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"pick needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: index shape {idx.shape} vs rows {a.shape[0]}")
    rows = np.arange(a.shape[0])
    ncols = a.shape[1]
    return _make(a.data[rows, idx], (a,),
                 lambda g: (scatter_rows(g, idx, ncols),), "pick")


def scatter_rows(v, idx, ncols: int) -> Tensor:
    """Adjoint of :func:`pick`: place v[i] at column idx[i] of a zero matrix."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeError(f"scatter_rows needs a 1-D tensor, got {v.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros((v.shape[0], ncols))
    data[np.arange(v.shape[0]), idx] = v.data
    return _make(data, (v,), lambda g: (pick(g, idx),), "scatter")


def onehot_rows(idx, ncols: int) -> Tensor:
    """Constant one-hot matrix e_{idx[i]} per row."""
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros((idx.shape[0], ncols))
    data[np.arange(idx.shape[0]), idx] = 1.0
    return Tensor(data)


# ------------------------------------------------------------------ backward

class Gradients:
    """Map from parameter tensor to its gradient tensor."""

    def __init__(self, pairs: Iterable[tuple[Tensor, Tensor]]):
        self._by_id = {id(p): (p, g) for p, g in pairs}

    def __getitem__(self, param: Tensor) -> Tensor:
        return self._by_id[id(param)][1]

    def __contains__(self, param: Tensor) -> bool:
        return id(param) in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)

    def as_list(self, params: Sequence[Tensor]) -> list[Tensor]:
        return [self[p] for p in params]

    def items(self):
        return list(self._by_id.values())


def backward(output: Tensor, params: Sequence[Tensor],
             create_graph: bool = False) -> Gradients:
    """d(output)/d(param) for every param, as a :class:`Gradients` map.

    ``output`` must be scalar. Parameters the output does not depend on get
    exact zero gradients. With ``create_graph=True`` the returned gradients
    are themselves recorded on the active tape and can be differentiated
    again.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got {output.shape}")
    if create_graph and _active_tape() is None:
        raise ContractError("create_graph=True requires an active Tape")

    param_ids = {id(p) for p in params}

    # reachable subgraph, parents before children
    reachable: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.uid in reachable:
            continue
        reachable[node.uid] = node
        stack.extend(node._parents)
    order = sorted(reachable)

    # which nodes can influence a requested parameter
    needs: dict[int, bool] = {}
    for uid in order:
        node = reachable[uid]
        needs[uid] = (id(node) in param_ids
                      or any(needs[p.uid] for p in node._parents
                             if p.uid in needs))

    grads: dict[int, Tensor] = {output.uid: Tensor(np.ones(output.shape))}

    def run():
        for uid in reversed(order):
            node = reachable[uid]
            g = grads.pop(uid, None)
            if g is None or node._vjp is None:
                continue
            if not needs.get(uid, False) and id(node) not in param_ids:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if not (needs.get(parent.uid, False)
                        or id(parent) in param_ids):
                    continue
                held = grads.get(parent.uid)
                grads[parent.uid] = pg if held is None else add(held, pg)

    if create_graph:
        run()
    else:
        with no_grad():
            run()

    out = []
    for p in params:
        g = grads.get(p.uid)
        if g is None or id(p) not in param_ids or p.uid not in reachable:
            g = Tensor(np.zeros(p.shape))
        out.append((p, g))
    return Gradients(out)


# ------------------------------------------------------------- hypergradient

def _ensure_finite(arrays: Iterable[np.ndarray], stage: str) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite value in {stage}", stage=stage)


def hypergradient(inner_loss: Callable[[Sequence[Tensor]], Tensor],
                  meta_loss: Callable[[Sequence[Tensor]], Tensor],
                  w_params: Sequence[Tensor],
                  theta_params: Sequence[Tensor],
                  alpha: float,
                  method: str = "exact") -> Gradients:
    """Gradient of ``meta_loss`` at the one-step-lookahead parameters.

    The lookahead is ``w~ = w - alpha * d(inner_loss)/dw`` where
    ``inner_loss`` is a mean over its batch and closes over the adjuster
    parameters ``theta_params``; the result is the gradient of
    ``meta_loss(w~)`` with respect to theta.

    ``method="exact"`` differentiates through the lookahead on the tape.
    ``method="finite_diff"`` uses the two-sided approximation
    ``-alpha * (g_theta(w + r v) - g_theta(w - r v)) / (2 r)`` with
    ``v = d(meta_loss)/dw~`` and perturbation radius ``r = 0.01 / ||v||``.
    """
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    if method == "exact":
        return _hypergradient_exact(inner_loss, meta_loss, w_params,
                                    theta_params, alpha)
    if method == "finite_diff":
        return _hypergradient_fd(inner_loss, meta_loss, w_params,
                                 theta_params, alpha)
    raise ContractError(f"unknown hypergradient method {method!r}")


def _hypergradient_exact(inner_loss, meta_loss, w_params, theta_params, alpha):
    with Tape():
        inner = inner_loss(w_params)
        _ensure_finite([inner.data], "inner_loss")
        gw = backward(inner, w_params, create_graph=True)
        _ensure_finite([gw[w].data for w in w_params], "inner_gradient")
        w_tilde = [sub(w, mul(gw[w], alpha)) for w in w_params]
        meta = meta_loss(w_tilde)
        _ensure_finite([meta.data], "meta_loss")
        gt = backward(meta, theta_params)
        _ensure_finite([gt[t].data for t in theta_params], "hypergradient")
    return gt


def _hypergradient_fd(inner_loss, meta_loss, w_params, theta_params, alpha):
    with Tape():
        inner = inner_loss(w_params)
        gw = backward(inner, w_params)
    _ensure_finite([gw[w].data for w in w_params], "inner_gradient")
    w_tilde = [Tensor(w.data - alpha * gw[w].data, requires_grad=True)
               for w in w_params]
    with Tape():
        meta = meta_loss(w_tilde)
        v = backward(meta, w_tilde)
    vs = [v[w].data for w in w_tilde]
    _ensure_finite(vs, "meta_gradient")
    vnorm = math.sqrt(sum(float(np.sum(a * a)) for a in vs))
    if vnorm == 0.0:
        return Gradients((t, Tensor(np.zeros(t.shape))) for t in theta_params)
    r = 0.01 / vnorm

    def theta_grad_at(ws_data):
        ws = [Tensor(d, requires_grad=True) for d in ws_data]
        with Tape():
            loss = inner_loss(ws)
            gt = backward(loss, theta_params)
        return [gt[t].data for t in theta_params]

    gp = theta_grad_at([w.data + r * gv for w, gv in zip(w_params, vs)])
    gm = theta_grad_at([w.data - r * gv for w, gv in zip(w_params, vs)])
    out = []
    for t, p, m in zip(theta_params, gp, gm):
        hg = -alpha * (p - m) / (2.0 * r)
        out.append((t, Tensor(hg)))
    _ensure_finite([g.data for _, g in out], "hypergradient")
    return Gradients(out)
