"""Numeric backend: shaped tensors, reverse-mode gradients, finite-difference oracle.

Every real-valued quantity in the pipeline lives in a :class:`Tensor`.
Forward ops record backward closures on the fly (micrograd style, but on
numpy arrays); ``backward`` walks the recorded graph once in reverse
topological order. ``check_gradients`` is the independent verification
route: central finite differences against whatever the closures computed.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf


class ShapeMismatch(ValueError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(s) for s in shapes))
        self.op = op
        self.shapes = shapes


class NotScalar(ValueError):
    pass


_FLOAT_DTYPES = (np.float32, np.float64)
_default_dtype = np.float64
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used when wrapping non-float data (32- or 64-bit)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


def dtype_for(precision: int):
    """Map a precision config value (32 or 64) to a numpy dtype."""
    if precision == 32:
        return np.float32
    if precision == 64:
        return np.float64
    raise ValueError(f"precision must be 32 or 64, got {precision}")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A shaped float array with an optional reverse-mode gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op or 'leaf'!r}, requires_grad={self.requires_grad})"

    # light operator sugar; model code mostly calls the module functions
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents, backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape)

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.data.shape))

    return _make(data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatch("sub", a.shape, b.shape)

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad, b.data.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch("mul", a.shape, b.shape)

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * s)

    return _make(a.data * s, (a,), backward, "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad)

    return _make(a.data + float(c), (a,), backward, "add_scalar")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix multiply; supports stacked leading axes (batched heads)."""
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    def backward(out):
        if a.requires_grad:
            ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(out.grad, inverse))

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *[t.shape for t in tensors])
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(out.grad[tuple(idx)])

    return _make(data, tensors, backward, "concat")


def split(a: Tensor, sizes, axis: int = 0):
    """Inverse of concat: cut `a` into consecutive blocks along `axis`."""
    if sum(sizes) != a.data.shape[axis]:
        raise ShapeMismatch("split", a.shape, tuple(sizes))
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(int(lo), int(hi))
        idx = tuple(idx)

        def backward(out, idx=idx):
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[idx] = out.grad
                a.accumulate_grad(g)

        outs.append(_make(a.data[idx], (a,), backward, "split"))
    return outs


def softmax(a: Tensor) -> Tensor:
    """Row softmax along the last axis, max-subtracted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(out):
        if a.requires_grad:
            s = (out.grad * data).sum(axis=-1, keepdims=True)
            a.accumulate_grad((out.grad - s) * data)

    return _make(data, (a,), backward, "softmax")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth, so finite differences stay honest."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    data = x * cdf

    def backward(out):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            a.accumulate_grad(out.grad * (cdf + x * pdf))

    return _make(data.astype(x.dtype), (a,), backward, "gelu")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    data = a.data ** p

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * p * a.data ** (p - 1.0))

    return _make(data, (a,), backward, "power")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(out):
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_tensors(tensors) -> Tensor:
    """Elementwise arithmetic mean over a set of same-shape tensors."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("mean_tensors needs at least one tensor")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise ShapeMismatch("mean_tensors", shape, t.shape)
    k = len(tensors)
    data = tensors[0].data.copy()
    for t in tensors[1:]:
        data += t.data
    data /= k

    def backward(out):
        g = out.grad / k
        for t in tensors:
            if t.requires_grad:
                t.accumulate_grad(g)

    return _make(data, tensors, backward, "mean_tensors")


def maxpool_rows(a: Tensor) -> Tensor:
    """Column-wise max over the first axis; (W, E) -> (1, E)."""
    if a.data.ndim != 2:
        raise ShapeMismatch("maxpool_rows", a.shape)
    arg = a.data.argmax(axis=0)
    data = a.data[arg, np.arange(a.data.shape[1])][None, :]

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[arg, np.arange(a.data.shape[1])] = out.grad[0]
            a.accumulate_grad(g)

    return _make(data, (a,), backward, "maxpool_rows")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of `table` at integer positions `ids`."""
    idx = np.asarray(ids, dtype=np.int64)
    data = table.data[idx]

    def backward(out):
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, idx, out.grad)
            table.accumulate_grad(g)

    return _make(data, (table,), backward, "gather_rows")


def cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Per-row cross entropy, fused with log-softmax: (n, V) + (n,) ids -> (n,)."""
    idx = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != logits.data.shape[0]:
        raise ShapeMismatch("cross_entropy_with_logits", logits.shape, idx.shape)
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    sm = e / e.sum(axis=-1, keepdims=True)
    logsumexp = np.log(e.sum(axis=-1)) + zmax[:, 0]
    rows = np.arange(idx.shape[0])
    data = logsumexp - z[rows, idx]

    def backward(out):
        if logits.requires_grad:
            g = sm * out.grad[:, None]
            g[rows, idx] -= out.grad
            logits.accumulate_grad(g)

    return _make(data, (logits,), backward, "cross_entropy_with_logits")


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "softmax": softmax,
    "mean_tensors": mean_tensors,
    "maxpool_rows": maxpool_rows,
    "gather_rows": gather_rows,
    "reshape": reshape,
    "transpose": transpose,
    "scale": scale,
    "cross_entropy_with_logits": cross_entropy_with_logits,
    "sub": sub,
    "split": split,
    "sum": tsum,
    "mean": tmean,
    "power": power,
    "gelu": gelu,
    "add_scalar": add_scalar,
}


def primitive_set():
    """Names of every forward+backward capability the backend provides."""
    return sorted(PRIMITIVES)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize along the last axis; built from primitives so the gradient
    path is covered by the per-primitive checks."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add_scalar(var, eps), -0.5)
    return add(mul(mul(xc, inv), gain), bias)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable requires_grad leaf.

    Leaf gradients accumulate across calls; interior-node buffers are
    reset per call. Disconnected leaves keep whatever their buffer held
    (zeros after ``zero_grad``).
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    for node in topo:
        if node._parents:
            node.grad = np.zeros_like(node.data)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    tol: float
    h: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err <= self.tol for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def failures(self):
        return [e for e in self.entries if e.max_rel_err > self.tol]

    def __str__(self):
        lines = [f"gradient check: h={self.h:g} tol={self.tol:g} -> "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for e in self.entries:
            mark = "ok  " if e.max_rel_err <= self.tol else "FAIL"
            lines.append(f"  {mark} {e.name:<28} max_rel_err={e.max_rel_err:.3e} ({e.checked} entries)")
        return "\n".join(lines)


def check_gradients(f, params, h: float = 1e-5, tol: float = 1e-6,
                    max_entries: int = 64, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``params`` is a list of Tensors or (name, Tensor) pairs; tensors larger
    than ``max_entries`` are subsampled (seeded). The per-tensor relative
    error divides by max(|ad|, |fd|, 1e-6), so tensors whose true gradient
    is ~0 are compared on an absolute 1e-6 scale rather than against noise.
    """
    items = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            items.append(p)
        else:
            items.append((f"param{i}", p))
    for _, p in items:
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise NotScalar("check_gradients needs a scalar-producing closure")
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in items}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, h=h)
    for name, p in items:
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_entries:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=max_entries, replace=False)
        ana = analytic[name].reshape(-1)[idxs]
        num = np.empty(len(idxs), dtype=np.float64)
        with no_grad():
            for j, i in enumerate(idxs):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(f().data)
                flat[i] = orig - h
                f_minus = float(f().data)
                flat[i] = orig
                num[j] = (f_plus - f_minus) / (2.0 * h)
        denom = max(float(np.max(np.abs(ana), initial=0.0)),
                    float(np.max(np.abs(num), initial=0.0)), 1e-6)
        rel = float(np.max(np.abs(ana - num), initial=0.0) / denom)
        report.entries.append(GradCheckEntry(name=name, max_rel_err=rel, checked=len(idxs)))
    return report
