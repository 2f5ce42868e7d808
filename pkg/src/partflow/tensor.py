"""Dense tensors with reverse-mode automatic differentiation.

Everything learned in the pipeline runs on this engine: numpy arrays
wrapped in `Tensor` nodes that record closures for the backward pass.
Float32 is the training dtype; float64 graphs are used by the gradient
check harness (finite differences in float32 are too noisy for the
1e-3 tolerance this package asserts).
"""

from __future__ import annotations

import logging
import struct
from contextlib import contextmanager

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

# Clamp applied to probabilities before logs inside the loss helpers.
LOG_EPS = 1e-7

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    """A numpy array plus optional autodiff bookkeeping.

    `requires_grad` marks leaves whose gradients should be accumulated;
    interior nodes inherit it from their parents. `_backward` is a
    closure that scatters the node's `grad` into its parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = self.name or "tensor"
        return f"{tag}({self.data!r}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ------------------------------------------------------

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

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def astensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make_node(data, parents, backward_fn):
    """Wrap an op result; record the closure only when the graph is live."""
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if requires:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g, dtype=t.data.dtype), t.data.shape)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = astensor(a), astensor(b)
    _check_broadcast(a.data, b.data, "add")
    out_data = a.data + b.data

    def bwd(out):
        _accum(a, out.grad)
        _accum(b, out.grad)

    return _make_node(out_data, (a, b), bwd)


def sub(a, b):
    a, b = astensor(a), astensor(b)
    _check_broadcast(a.data, b.data, "sub")
    out_data = a.data - b.data

    def bwd(out):
        _accum(a, out.grad)
        _accum(b, -out.grad)

    return _make_node(out_data, (a, b), bwd)


def mul(a, b):
    a, b = astensor(a), astensor(b)
    _check_broadcast(a.data, b.data, "mul")
    out_data = a.data * b.data

    def bwd(out):
        _accum(a, out.grad * b.data)
        _accum(b, out.grad * a.data)

    return _make_node(out_data, (a, b), bwd)


def negate(a):
    a = astensor(a)

    def bwd(out):
        _accum(a, -out.grad)

    return _make_node(-a.data, (a,), bwd)


def div(a, b):
    a, b = astensor(a), astensor(b)
    _check_broadcast(a.data, b.data, "div")
    out_data = a.data / b.data

    def bwd(out):
        _accum(a, out.grad / b.data)
        _accum(b, -out.grad * a.data / (b.data * b.data))

    return _make_node(out_data, (a, b), bwd)


def relu(a):
    a = astensor(a)
    out_data = np.maximum(a.data, 0)

    def bwd(out):
        # out > 0 exactly where a > 0
        _accum(a, out.grad * (out.data > 0))

    return _make_node(out_data, (a,), bwd)


def sigmoid(a):
    a = astensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype)

    def bwd(out):
        _accum(a, out.grad * out.data * (1.0 - out.data))

    return _make_node(out_data, (a,), bwd)


def exp(a):
    a = astensor(a)
    out_data = np.exp(a.data)

    def bwd(out):
        _accum(a, out.grad * out.data)

    return _make_node(out_data, (a,), bwd)


def log(a):
    a = astensor(a)
    out_data = np.log(a.data)

    def bwd(out):
        _accum(a, out.grad / a.data)

    return _make_node(out_data, (a,), bwd)


def clamp(a, lo, hi):
    a = astensor(a)
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(out):
        _accum(a, out.grad * mask)

    return _make_node(out_data, (a,), bwd)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "relu": relu,
    "sigmoid": sigmoid, "exp": exp, "log": log, "negate": negate,
}


def elementwise(op_kind, a, b=None):
    """Dispatch by op name; binary ops require a second argument."""
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    fn = _ELEMENTWISE[op_kind]
    if op_kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn(a, b)
    return fn(a)


# -- matmul, shaping ---------------------------------------------------------

def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd(out):
        g = out.grad
        _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make_node(out_data, (a, b), bwd)


def reshape(a, shape):
    a = astensor(a)
    out_data = a.data.reshape(shape)

    def bwd(out):
        _accum(a, out.grad.reshape(a.data.shape))

    return _make_node(out_data, (a,), bwd)


def transpose(a, axes=None):
    a = astensor(a)
    out_data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bwd(out):
        _accum(a, np.transpose(out.grad, inv))

    return _make_node(out_data, (a,), bwd)


def concat(tensors, axis=-1):
    tensors = [astensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(out):
        pieces = np.split(out.grad, splits, axis=axis)
        for t, g in zip(tensors, pieces):
            _accum(t, g)

    return _make_node(out_data, tuple(tensors), bwd)


def split(a, sizes, axis=-1):
    """Split into consecutive chunks of the given sizes along `axis`."""
    a = astensor(a)
    if sum(sizes) != a.data.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis of length "
                         f"{a.data.shape[axis]}")
    cuts = np.cumsum(sizes)[:-1]
    pieces_data = np.split(a.data, cuts, axis=axis)
    outs = []
    offset = 0
    for piece in pieces_data:
        start = offset
        size = piece.shape[axis]
        offset += size

        def bwd(out, start=start, size=size):
            g = np.zeros_like(a.data)
            sl = [slice(None)] * a.data.ndim
            sl[axis] = slice(start, start + size)
            g[tuple(sl)] = out.grad
            _accum(a, g)

        outs.append(_make_node(piece.copy(), (a,), bwd))
    return outs


def gather(a, indices, axis=0):
    """Take rows (or slices along `axis`); backward scatter-adds."""
    a = astensor(a)
    idx = np.asarray(indices)
    out_data = np.take(a.data, idx, axis=axis)

    def bwd(out):
        g = np.zeros_like(a.data)
        if axis == 0 and idx.ndim == 1:
            np.add.at(g, idx, out.grad)
        else:
            moved = np.moveaxis(g, axis, 0)
            np.add.at(moved, idx, np.moveaxis(out.grad, axis, 0) if idx.ndim == 1 else out.grad)
        _accum(a, g)

    return _make_node(out_data, (a,), bwd)


def broadcast_to(a, shape):
    a = astensor(a)
    out_data = np.broadcast_to(a.data, shape)

    def bwd(out):
        _accum(a, out.grad)

    return _make_node(np.ascontiguousarray(out_data), (a,), bwd)


# -- reductions --------------------------------------------------------------

def reduce_max(a, axis):
    """Max over `axis`; gradient routes only to the argmax (lowest index wins ties)."""
    a = astensor(a)
    if a.data.shape == () or (axis is not None and a.data.shape[axis] == 0):
        raise ShapeError("reduce over an empty axis")
    if axis is None:
        raise ValueError("reduce_max requires an explicit axis")
    recording = _grad_enabled and (a.requires_grad or a._backward is not None)
    if not recording:
        return _make_node(np.max(a.data, axis=axis), (a,), None)
    # one scan: argmax, then gather the max values
    arg = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis)
    out_data = np.squeeze(out_data, axis=axis)

    def bwd(out):
        g = np.zeros_like(a.data)
        moved = np.moveaxis(g, axis, -1)
        np.put_along_axis(moved, arg[..., None], out.grad[..., None], axis=-1)
        _accum(a, g)

    return _make_node(out_data, (a,), bwd)


def reduce_sum(a, axis=None):
    a = astensor(a)
    if axis is not None and a.data.shape[axis] == 0:
        raise ShapeError("reduce over an empty axis")
    out_data = np.sum(a.data, axis=axis)

    def bwd(out):
        if axis is None:
            g = np.broadcast_to(out.grad, a.data.shape)
        else:
            g = np.broadcast_to(np.expand_dims(out.grad, axis), a.data.shape)
        _accum(a, g)

    return _make_node(out_data, (a,), bwd)


def reduce_mean(a, axis=None):
    a = astensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    if n == 0:
        raise ShapeError("reduce over an empty axis")
    return mul(reduce_sum(a, axis), 1.0 / n)


def reduce(op_kind, a, axis):
    if op_kind == "max":
        return reduce_max(a, axis)
    if op_kind == "sum":
        return reduce_sum(a, axis)
    if op_kind == "mean":
        return reduce_mean(a, axis)
    raise ValueError(f"unknown reduction {op_kind!r}")


def softmax_rows(a):
    """Row-wise softmax of a 2-D tensor, stabilized by row-max subtraction."""
    a = astensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got shape {a.shape}")
    if np.isnan(a.data).any():
        raise ValueError("softmax_rows: NaN in input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bwd(out):
        s = out.data
        dot = (out.grad * s).sum(axis=1, keepdims=True)
        _accum(a, s * (out.grad - dot))

    return _make_node(out_data, (a,), bwd)


# -- losses ------------------------------------------------------------------

def loss_squared_l2(pred, target):
    """Sum of squared differences (a scalar tensor)."""
    pred = astensor(pred)
    target = astensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"squared-L2: shapes disagree: {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    return reduce_sum(mul(d, d))


def loss_bce(prob, target, reduction="mean"):
    """Binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    prob = astensor(prob)
    target = astensor(target)
    if prob.shape != target.shape:
        raise ShapeError(f"BCE: shapes disagree: {prob.shape} vs {target.shape}")
    p = clamp(prob, LOG_EPS, 1.0 - LOG_EPS)
    term = add(mul(target, log(p)), mul(sub(1.0, target), log(sub(1.0, p))))
    total = negate(reduce_sum(term))
    if reduction == "mean":
        return mul(total, 1.0 / max(1, prob.size))
    return total


def loss_softmax_ce(logits, indices, reduction="mean"):
    """Softmax cross-entropy of 2-D logits against integer class indices."""
    logits = astensor(logits)
    idx = np.asarray(indices, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError("softmax CE expects 2-D logits")
    if idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise ShapeError("one target index per logit row required")
    if idx.size and (idx.min() < 0 or idx.max() >= logits.shape[1]):
        raise IndexError("target index out of range")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    picked = x[np.arange(x.shape[0]), idx]
    per_row = lse - picked
    scale = 1.0 / max(1, x.shape[0]) if reduction == "mean" else 1.0
    out_data = np.asarray(per_row.sum() * scale, dtype=x.dtype)

    def bwd(out):
        soft = np.exp(x - m)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(x.shape[0]), idx] -= 1.0
        _accum(logits, out.grad * scale * soft)

    return _make_node(out_data, (logits,), bwd)


def losses(kind, prediction, target, reduction="mean"):
    if kind == "squared-l2":
        return loss_squared_l2(prediction, target)
    if kind == "binary-cross-entropy":
        return loss_bce(prediction, target, reduction)
    if kind == "softmax-cross-entropy":
        return loss_softmax_ce(prediction, target, reduction)
    raise ValueError(f"unknown loss kind {kind!r}")


# -- backward pass -----------------------------------------------------------

def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
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
            if p._backward is not None or p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Backpropagate from a scalar; returns {leaf tensor: gradient array}.

    Gradients accumulate additively into `.grad`; call `zero_grad` on the
    leaves between steps.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward root must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    return {n: n.grad for n in order if n._backward is None and n.requires_grad}


# -- Adam --------------------------------------------------------------------

class AdamState:
    """First/second moment accumulators for a named parameter set."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state, lr):
    """One Adam update with bias correction, applied in place.

    `params` maps names to Tensors, `grads` names to arrays. A NaN gradient
    rejects the whole step (warning logged, nothing mutated).
    """
    for name, g in grads.items():
        if g is None:
            continue
        if not np.isfinite(g).all():
            logger.warning("adam_step rejected: non-finite gradient for %r", name)
            return params
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if p.data.shape != np.shape(g):
            raise ShapeError(f"adam_step: gradient shape {np.shape(g)} != param {p.data.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return params


# -- checkpoint I/O ----------------------------------------------------------

CHECKPOINT_MAGIC = b"PTFL"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, entries):
    """Write named float arrays to the binary checkpoint format."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries.items():
            data = np.asarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            for ext in data.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(data.tobytes(order="C"))


def load_checkpoint(path):
    """Read a checkpoint back into {name: float32 array}."""
    entries = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            payload = np.frombuffer(fh.read(4 * n), dtype="<f4")
            entries[name] = payload.reshape(shape).copy()
    return entries


# -- finite-difference gradient checking -------------------------------------

def float64_params(named_tensors, rng=None, jitter=0.05):
    """Float64 copies of parameters for gradient checking.

    `jitter` adds noise so zero-initialized biases do not sit exactly on
    relu kinks, where finite differences legitimately disagree with the
    subgradient.
    """
    out = {}
    for name, p in named_tensors.items():
        data = np.asarray(p.data, dtype=np.float64).copy()
        if rng is not None and jitter:
            data = data + jitter * rng.normal(size=data.shape)
        out[name] = Tensor(data, requires_grad=True, name=name)
    return out


def gradcheck(fn, params, step=1e-4, tol=1e-3, max_entries=None, rng=None):
    """Compare analytic gradients of `fn(params)` against central differences.

    `params` maps names to float64 Tensors with requires_grad set. Returns
    the worst relative error; raises AssertionError above `tol`. For large
    parameter sets, `max_entries` checks a seeded random subset of entries
    per tensor instead of all of them.
    """
    for p in params.values():
        if p.data.dtype != np.float64:
            raise ValueError("gradcheck requires float64 parameters")
        p.zero_grad()
    loss = fn(params)
    backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            picks = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            picks = np.arange(flat.size)
        num = np.zeros(picks.size)
        for j, i in enumerate(picks):
            keep = flat[i]
            flat[i] = keep + step
            with no_grad():
                hi = float(fn(params).data)
            flat[i] = keep - step
            with no_grad():
                lo = float(fn(params).data)
            flat[i] = keep
            num[j] = (hi - lo) / (2 * step)
        ref = analytic[name].reshape(-1)[picks]
        denom = max(1e-4, float(np.abs(num).max()), float(np.abs(ref).max()))
        err = float(np.abs(num - ref).max()) / denom
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(f"gradient mismatch for {name!r}: relative error {err:.3e}")
    return worst
