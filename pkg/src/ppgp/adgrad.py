"""Small define-by-run reverse-mode differentiation over dense numpy arrays.

Every primitive evaluates eagerly and records a closure that maps the
gradient of its output onto the gradients of its operands.  A fresh graph is
built on every evaluation, so nothing is shared between optimisation steps.

    >>> x = leaf(np.array([1.0, 2.0, 3.0]), "x")
    >>> f = sum(square(x))
    >>> f.value
    14.0
    >>> backward(f)["x"]
    array([2., 4., 6.])
"""
import builtins

import numpy as np
from scipy import linalg as sla

__all__ = [
    "Node", "ShapeError", "CholeskyError", "leaf", "const", "forward", "backward",
    "check_gradients", "add", "sub", "neg", "mul", "div", "matmul", "transpose",
    "exp", "log", "logistic", "softplus", "square", "sqrt", "clip", "sum", "trace",
    "diag", "diag_embed", "tril", "reshape", "take", "concatenate", "cholesky",
    "solve_triangular", "logdet", "quad_form", "JITTER_FACTOR", "JITTER_RETRIES", "PIVOT_TOLERANCE",
]

JITTER_FACTOR = 1e-6
JITTER_RETRIES = 3
# a factor whose smallest squared pivot falls below this fraction of the mean
# diagonal is numerically singular and treated like a failed factorisation
PIVOT_TOLERANCE = 1e-10


class ShapeError(ValueError):
    pass


class CholeskyError(np.linalg.LinAlgError):
    def __init__(self, min_eig, jitter):
        super().__init__(
            f"Cholesky failed after jitter escalation (last jitter {jitter:.3g}); "
            f"minimum eigenvalue estimate {min_eig:.6g}")
        self.min_eig = min_eig


class Node:
    """A value in the recorded graph.

    Leaves carry a ``name`` and have no parents.  Interior nodes keep their
    parents and one vector-Jacobian closure per parent.
    """

    __slots__ = ("value", "parents", "vjps", "name")
    __array_priority__ = 100

    def __init__(self, value, parents=(), vjps=(), name=None):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def T(self):
        return transpose(self)

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        tag = f"leaf {self.name!r}" if self.name is not None else "node"
        return f"<{tag} shape={self.shape}>"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)


def leaf(value, name):
    """A differentiable input identified by ``name``."""
    return Node(np.array(value, dtype=float), name=name)


def const(value):
    return Node(np.asarray(value, dtype=float))


def _wrap(x):
    return x if isinstance(x, Node) else const(x)


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def forward(expr):
    """Value of an expression (graphs are evaluated eagerly)."""
    return _val(expr)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _node(value, pairs):
    """Build an interior node from (operand, vjp) pairs, dropping constants."""
    parents, vjps = [], []
    for p, f in pairs:
        if isinstance(p, Node) and (p.name is not None or p.parents):
            parents.append(p)
            vjps.append(f)
    return Node(value, tuple(parents), tuple(vjps))


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    va, vb = _val(a), _val(b)
    return _node(va + vb, [(a, lambda g: _unbroadcast(g, va.shape)),
                           (b, lambda g: _unbroadcast(g, vb.shape))])


def sub(a, b):
    va, vb = _val(a), _val(b)
    return _node(va - vb, [(a, lambda g: _unbroadcast(g, va.shape)),
                           (b, lambda g: -_unbroadcast(g, vb.shape))])


def neg(a):
    return _node(-_val(a), [(a, lambda g: -g)])


def mul(a, b):
    va, vb = _val(a), _val(b)
    return _node(va * vb, [(a, lambda g: _unbroadcast(g * vb, va.shape)),
                           (b, lambda g: _unbroadcast(g * va, vb.shape))])


def div(a, b):
    va, vb = _val(a), _val(b)
    out = va / vb
    return _node(out, [(a, lambda g: _unbroadcast(g / vb, va.shape)),
                       (b, lambda g: _unbroadcast(-g * out / vb, vb.shape))])


def matmul(a, b):
    va, vb = _val(a), _val(b)
    if va.ndim == 0 or vb.ndim == 0 or va.shape[-1] != vb.shape[0]:
        raise ShapeError(f"matmul shapes {va.shape} and {vb.shape} do not align")

    def ga(g):
        if vb.ndim == 1:
            return np.outer(g, vb) if va.ndim == 2 else g * vb
        return g @ vb.T if va.ndim == 2 else vb @ g

    def gb(g):
        if va.ndim == 1:
            return np.outer(va, g) if vb.ndim == 2 else g * va
        return va.T @ g

    return _node(va @ vb, [(a, ga), (b, gb)])


def transpose(a):
    return _node(_val(a).T, [(a, lambda g: g.T)])


# ---------------------------------------------------------------- elementwise

def exp(a):
    out = np.exp(_val(a))
    return _node(out, [(a, lambda g: g * out)])


def log(a):
    va = _val(a)
    return _node(np.log(va), [(a, lambda g: g / va)])


def logistic(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * _val(a)))
    return _node(out, [(a, lambda g: g * out * (1.0 - out))])


def softplus(a):
    """log(1 + exp(a)), stable for large |a|."""
    va = _val(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * va))
    return _node(np.logaddexp(0.0, va), [(a, lambda g: g * sig)])


def square(a):
    va = _val(a)
    return _node(va * va, [(a, lambda g: 2.0 * g * va)])


def sqrt(a):
    out = np.sqrt(_val(a))
    return _node(out, [(a, lambda g: 0.5 * g / out)])


def clip(a, lo, hi):
    """Clamp to [lo, hi]; the gradient is zero where clamping is active."""
    va = _val(a)
    inside = (va >= lo) & (va <= hi)
    return _node(np.clip(va, lo, hi), [(a, lambda g: g * inside)])


# ---------------------------------------------------------------- reductions, shapes

def sum(a, axis=None):
    va = _val(a)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, va.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), va.shape).copy()

    return _node(np.sum(va, axis=axis), [(a, vjp)])


def trace(a):
    va = _val(a)
    if va.ndim != 2 or va.shape[0] != va.shape[1]:
        raise ShapeError(f"trace needs a square matrix, got {va.shape}")
    return _node(np.trace(va), [(a, lambda g: g * np.eye(va.shape[0]))])


def diag(a):
    """Diagonal of a square matrix."""
    va = _val(a)
    if va.ndim != 2:
        raise ShapeError(f"diag expects a matrix, got {va.shape}")
    return _node(np.diagonal(va).copy(), [(a, lambda g: np.diag(g))])


def diag_embed(a):
    """Square matrix with ``a`` on the diagonal."""
    va = _val(a)
    if va.ndim != 1:
        raise ShapeError(f"diag_embed expects a vector, got {va.shape}")
    return _node(np.diag(va), [(a, lambda g: np.diagonal(g).copy())])


def tril(a, k=0):
    va = _val(a)
    mask = np.tril(np.ones(va.shape), k)
    return _node(va * mask, [(a, lambda g: g * mask)])


def reshape(a, shape):
    va = _val(a)
    return _node(va.reshape(shape), [(a, lambda g: np.reshape(g, va.shape))])


def take(a, idx, axis=0):
    va = _val(a)
    idx = np.asarray(idx, dtype=int)

    def vjp(g):
        out = np.zeros_like(va)
        if axis == 0:
            np.add.at(out, idx, g)
        else:
            np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return out

    return _node(np.take(va, idx, axis=axis), [(a, vjp)])


def _getitem(a, key):
    va = _val(a)

    def vjp(g):
        out = np.zeros_like(va)
        np.add.at(out, key, g)
        return out

    return _node(va[key], [(a, vjp)])


def concatenate(parts, axis=0):
    vals = [_val(p) for p in parts]
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    pairs = []
    for i, p in enumerate(parts):
        sl = [slice(None)] * vals[i].ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        pairs.append((p, lambda g, sl=tuple(sl): g[sl]))
    return _node(np.concatenate(vals, axis=axis), pairs)


# ---------------------------------------------------------------- linear algebra

def _phi(x):
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def _cholesky_value(va):
    scale = float(np.mean(np.diag(va))) if va.size else 1.0
    try:
        L = np.linalg.cholesky(va)
        if va.size == 0 or np.min(np.diag(L)) ** 2 >= PIVOT_TOLERANCE * scale:
            return L
    except np.linalg.LinAlgError:
        pass
    base = JITTER_FACTOR * builtins.max(float(np.mean(np.diag(va))), 1e-300)
    jitter = base
    for _ in range(JITTER_RETRIES):
        try:
            return np.linalg.cholesky(va + jitter * np.eye(va.shape[0]))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    min_eig = float(np.linalg.eigvalsh(0.5 * (va + va.T))[0])
    raise CholeskyError(min_eig, jitter / 10.0)


def cholesky(a):
    """Lower Cholesky factor, adding diagonal jitter only if plain factorisation fails.

    The gradient is the symmetric one (perturbations of ``a`` are assumed
    symmetric); a jitter that had to be added is treated as a constant.
    """
    va = _val(a)
    if va.ndim != 2 or va.shape[0] != va.shape[1]:
        raise ShapeError(f"cholesky needs a square matrix, got {va.shape}")
    L = _cholesky_value(va)

    def vjp(g):
        # L^{-T} phi(L^T g) L^{-1}, then symmetrised
        X = sla.solve_triangular(L, _phi(L.T @ g).T, lower=True, trans="T")
        X = sla.solve_triangular(L, X.T, lower=True, trans="T")
        return 0.5 * (X + X.T)

    return _node(L, [(a, vjp)])


def solve_triangular(L, b, trans=False):
    """Solve ``L x = b`` (or ``L^T x = b`` with ``trans``) for lower-triangular ``L``."""
    vL, vb = _val(L), _val(b)
    if vL.shape[0] != vb.shape[0]:
        raise ShapeError(f"solve_triangular shapes {vL.shape} and {vb.shape} do not align")
    x = sla.solve_triangular(vL, vb, lower=True, trans="T" if trans else "N")

    def gb(g):
        return sla.solve_triangular(vL, g, lower=True, trans="N" if trans else "T")

    def gL(g):
        G = gb(g)
        G2, x2 = (G[:, None], x[:, None]) if x.ndim == 1 else (G, x)
        return -np.tril(x2 @ G2.T if trans else G2 @ x2.T)

    return _node(x, [(L, gL), (b, gb)])


def logdet(a):
    """log|a| for symmetric positive-definite ``a``, via its Cholesky factor."""
    return 2.0 * sum(log(diag(cholesky(a))))


def quad_form(a, x):
    """x^T a^{-1} x for symmetric positive-definite ``a``."""
    w = solve_triangular(cholesky(a), x)
    return sum(square(w))


# ---------------------------------------------------------------- reverse sweep

def _toposort(out):
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def backward(expr):
    """Gradients of a scalar expression with respect to every reachable named leaf.

    Leaves sharing a name have their gradients summed.
    """
    if not isinstance(expr, Node):
        return {}
    if np.ndim(expr.value) != 0:
        raise ShapeError(f"backward needs a scalar output, got shape {expr.shape}")
    grads = {id(expr): np.ones(())}
    out = {}
    for node in _toposort(expr):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.name is not None:
            prev = out.get(node.name)
            out[node.name] = g.copy() if prev is None else prev + g
        for p, f in zip(node.parents, node.vjps):
            contrib = f(g)
            key = id(p)
            grads[key] = contrib if key not in grads else grads[key] + contrib
    return out


def check_gradients(f, point, step=1e-5):
    """Largest relative disagreement between reverse-mode and central differences.

    ``f`` maps a dict of leaves (keyed like ``point``) to a scalar expression.
    The error per entry is ``|a - fd| / (|a| + |fd| + 1e-12)``.
    """
    point = {k: np.array(v, dtype=float) for k, v in point.items()}
    out = f({k: leaf(v, k) for k, v in point.items()})
    analytic = backward(out)
    worst = 0.0
    for name, value in point.items():
        a = analytic.get(name, np.zeros_like(value))
        fd = np.zeros_like(value)
        for i in np.ndindex(value.shape):
            shifted = dict(point)
            up, down = value.copy(), value.copy()
            up[i] += step
            down[i] -= step
            shifted[name] = up
            fp = float(_val(f(shifted)))
            shifted[name] = down
            fm = float(_val(f(shifted)))
            fd[i] = (fp - fm) / (2.0 * step)
        err = np.abs(a - fd) / (np.abs(a) + np.abs(fd) + 1e-12)
        if err.size:
            worst = builtins.max(worst, float(err.max()))
    return worst
