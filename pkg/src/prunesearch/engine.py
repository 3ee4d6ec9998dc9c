"""Dense-array reverse-mode autodiff on float64 numpy arrays.

Every primitive records its operands and a backward closure on the output
node; calling backward() on a scalar walks the graph in reverse topological
order and accumulates gradients additively over fan-out. All values are
checked for finiteness after every primitive — NaN/Inf raises instead of
propagating silently.

Broadcasting is restricted: the result shape of an elementwise op must equal
one of the operand shapes (right-aligned numpy expansion of the smaller
operand). Anything fancier needs an explicit reshape so each backward rule
stays auditable.
"""

import itertools
import math

import numpy as np

EPS = 1e-12  # additive floor for log and division

_node_counter = itertools.count()


class EngineError(Exception):
    pass


class ShapeError(EngineError):
    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class NonFiniteError(EngineError):
    def __init__(self, op, node_id):
        super().__init__(f"{op}: non-finite values in node {node_id}")


class GraphError(EngineError):
    pass


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A node in the computation graph.

    Leaf tensors hold parameters or constants; interior nodes additionally
    carry the parent tensors and a backward rule installed by the primitive
    that produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "node_id",
                 "_parents", "_backward", "_op", "_backward_done")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _op="leaf"):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id = next(_node_counter)
        self._parents = _parents
        self._backward = None
        self._op = _op
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, op={self._op}{tag})"

    def zero_grad(self):
        self.grad = None

    # -- graph construction helpers -------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g)  # private copy; callers may reuse g
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Every reachable tensor with requires_grad receives dLoss/dTensor in
        .grad (accumulated additively). Calling twice on the same node
        without rebuilding the graph is an error.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        if self._backward_done:
            raise GraphError("backward() already called on this node; rebuild the graph or reset")
        self._backward_done = True

        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(constant(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(constant(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(constant(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def softmax(self, axis=-1):
        return softmax(self, axis=axis)


def constant(value, name=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, name=name, _op="const")


def parameter(value, name=None):
    return Tensor(value, requires_grad=True, name=name, _op="param")


def _toposort(root):
    order = []
    visited = set()
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
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _make(data, parents, op):
    out = Tensor(data, requires_grad=_needs_grad(*parents), _parents=tuple(parents), _op=op)
    # NaN/Inf propagate through a sum, so one reduction checks every element
    with np.errstate(over="ignore", invalid="ignore"):
        if not math.isfinite(float(np.sum(out.data))):
            raise NonFiniteError(op, out.node_id)
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_elementwise(op, a, b):
    if a.shape == b.shape:
        return a.shape
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape)
    if out_shape != a.shape and out_shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)
    return out_shape


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = constant(a), constant(b)
    _check_elementwise("add", a, b)
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def sub(a, b):
    a, b = constant(a), constant(b)
    _check_elementwise("sub", a, b)
    out = _make(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))
        out._backward = _bw
    return out


def mul(a, b):
    a, b = constant(a), constant(b)
    _check_elementwise("mul", a, b)
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def div(a, b):
    """Elementwise a / (b + EPS); denominators are expected non-negative."""
    a, b = constant(a), constant(b)
    _check_elementwise("div", a, b)
    denom = b.data + EPS
    out = _make(a.data / denom, (a, b), "div")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / denom, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (denom * denom), b.shape))
        out._backward = _bw
    return out


def neg(a):
    a = constant(a)
    out = _make(-a.data, (a,), "neg")
    if out.requires_grad:
        def _bw(g):
            a._accumulate(-g)
        out._backward = _bw
    return out


# -- transcendental / unary -------------------------------------------------

def texp(a):
    a = constant(a)
    with np.errstate(over="ignore"):
        out = _make(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        e = out.data
        def _bw(g):
            a._accumulate(g * e)
        out._backward = _bw
    return out


def tlog(a):
    """log(x + EPS): the floor makes p*log(p) -> 0 as p -> 0."""
    a = constant(a)
    shifted = a.data + EPS
    if np.any(shifted <= 0):
        raise EngineError("log: operand below the EPS floor")
    out = _make(np.log(shifted), (a,), "log")
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g / shifted)
        out._backward = _bw
    return out


def ttan(a):
    a = constant(a)
    out = _make(np.tan(a.data), (a,), "tan")
    if out.requires_grad:
        c = np.cos(a.data)
        def _bw(g):
            a._accumulate(g / (c * c))
        out._backward = _bw
    return out


def ttanh(a):
    a = constant(a)
    out = _make(np.tanh(a.data), (a,), "tanh")
    if out.requires_grad:
        t = out.data
        def _bw(g):
            a._accumulate(g * (1.0 - t * t))
        out._backward = _bw
    return out


def sigmoid(a):
    a = constant(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(s, (a,), "sigmoid")
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g * s * (1.0 - s))
        out._backward = _bw
    return out


def tabs(a):
    """|x| with subgradient 0 at x = 0."""
    a = constant(a)
    out = _make(np.abs(a.data), (a,), "abs")
    if out.requires_grad:
        sgn = np.sign(a.data)
        def _bw(g):
            a._accumulate(g * sgn)
        out._backward = _bw
    return out


def powf(a, p):
    a = constant(a)
    out = _make(a.data ** p, (a,), f"pow{p}")
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g * p * a.data ** (p - 1.0))
        out._backward = _bw
    return out


def clip(a, lo, hi):
    """Clamp with pass-through gradient strictly inside (lo, hi)."""
    a = constant(a)
    out = _make(np.clip(a.data, lo, hi), (a,), "clip")
    if out.requires_grad:
        inside = ((a.data > lo) & (a.data < hi)).astype(np.float64)
        def _bw(g):
            a._accumulate(g * inside)
        out._backward = _bw
    return out


def gelu(a):
    """GELU, tanh approximation (smooth everywhere)."""
    a = constant(a)
    c = math.sqrt(2.0 / math.pi)
    x = a.data
    x2 = x * x
    t = np.tanh(c * (x + 0.044715 * (x2 * x)))
    out = _make(0.5 * x * (1.0 + t), (a,), "gelu")
    if out.requires_grad:
        du = c * (1.0 + 0.134145 * x2)
        local = 0.5 * (1.0 + t) + (0.5 * x) * ((1.0 - t * t) * du)
        def _bw(g):
            a._accumulate(g * local)
        out._backward = _bw
    return out


# -- matmul ------------------------------------------------------------------

def matmul(a, b):
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.ndim != b.ndim and b.ndim != 2 and a.ndim != 2:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = _make(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                if ga.shape != a.shape:  # b stacked higher than a
                    ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
                a._accumulate(ga)
            if b.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    k = a.shape[-1]
                    n = g.shape[-1]
                    gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                else:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                    if gb.shape != b.shape:
                        gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
                b._accumulate(gb)
        out._backward = _bw
    return out


# -- reductions / shape ------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = constant(a)
    out = _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))
        out._backward = _bw
    return out


def tmean(a, axis=None, keepdims=False):
    a = constant(a)
    out = _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        if axis is None:
            n = a.size
        elif isinstance(axis, tuple):
            n = int(np.prod([a.shape[i] for i in axis]))
        else:
            n = a.shape[axis]
        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape) / n)
        out._backward = _bw
    return out


def reshape(a, shape):
    a = constant(a)
    out = _make(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        orig = a.shape
        def _bw(g):
            a._accumulate(g.reshape(orig))
        out._backward = _bw
    return out


def transpose(a, axes):
    a = constant(a)
    out = _make(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        inv = np.argsort(axes)
        def _bw(g):
            a._accumulate(np.transpose(g, inv))
        out._backward = _bw
    return out


def linear(x, w, b):
    """Fused x @ w + b for 2-D w and trailing-dim bias."""
    x, w, b = constant(x), constant(w), constant(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("linear", x.shape, w.shape, b.shape)
    out = _make(np.matmul(x.data, w.data) + b.data, (x, w, b), "linear")
    if out.requires_grad:
        def _bw(g):
            if x.requires_grad:
                x._accumulate(np.matmul(g, w.data.T))
            if w.requires_grad:
                k = x.shape[-1]
                w._accumulate(x.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            if b.requires_grad:
                b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        out._backward = _bw
    return out


# -- normalizations ----------------------------------------------------------

def softmax(a, axis=-1):
    a = constant(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)
    out = _make(p, (a,), "softmax")
    if out.requires_grad:
        def _bw(g):
            inner = np.sum(g * p, axis=axis, keepdims=True)
            a._accumulate(p * (g - inner))
        out._backward = _bw
    return out


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalize over the trailing axis, then scale and shift.

    Composite of primitives, so the backward rule is assembled automatically.
    """
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = powf(add(var, constant(eps)), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


# -- selection ----------------------------------------------------------------

def where(cond, a, b):
    """Select a where cond else b; cond is a constant boolean array."""
    a, b = constant(a), constant(b)
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)
    out = _make(data, (a, b), "where")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * cond, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * (~cond), b.shape))
        out._backward = _bw
    return out


def take(a, idx):
    """Index-select along axis 0 with a constant integer index array."""
    a = constant(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = _make(a.data[idx], (a,), "take")
    if out.requires_grad:
        def _bw(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a._accumulate(ga)
        out._backward = _bw
    return out


def gather_rows(a, idx):
    """Gather rows per batch element: a (B,N,C), idx (B,K) -> (B,K,C)."""
    a = constant(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError("gather_rows", a.shape, idx.shape)
    bidx = np.arange(a.shape[0])[:, None]
    out = _make(a.data[bidx, idx], (a,), "gather_rows")
    if out.requires_grad:
        def _bw(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, (bidx, idx), g)
            a._accumulate(ga)
        out._backward = _bw
    return out


# -- losses --------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean softmax cross-entropy; labels are constant integer class ids."""
    logits = constant(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(z), axis=1))
    nll = logsumexp - z[np.arange(len(labels)), labels]
    out = _make(np.mean(nll), (logits,), "cross_entropy")
    if out.requires_grad:
        p = np.exp(z) / np.sum(np.exp(z), axis=1, keepdims=True)
        onehot = np.zeros_like(p)
        onehot[np.arange(len(labels)), labels] = 1.0
        B = len(labels)
        def _bw(g):
            logits._accumulate(g * (p - onehot) / B)
        out._backward = _bw
    return out


# -- verification ---------------------------------------------------------------

def gradient_check(f, params, h=1e-5, atol=0.0):
    """Max relative error between backward() gradients and central differences.

    f is a zero-argument callable rebuilding a scalar Tensor from params
    (a Tensor or a sequence of Tensors). Relative error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12).

    Central differences carry ~1e-16*|f|/h of roundoff, so tiny true
    gradients cannot be compared relatively; atol > 0 accepts coordinates
    whose absolute disagreement is below it.
    """
    if isinstance(params, Tensor):
        params = [params]
    if not (1e-6 <= h <= 1e-4):
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")

    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EngineError("gradient_check: non-finite objective near evaluation point")
            num = (fp - fm) / (2.0 * h)
            if abs(gflat[i] - num) < atol:
                continue
            err = abs(gflat[i] - num) / (abs(gflat[i]) + abs(num) + 1e-12)
            worst = max(worst, err)
    return worst
