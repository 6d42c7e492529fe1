"""Reverse-mode automatic differentiation over dense f64 arrays, plus the
two optimizers (Adam, L-BFGS) used by the rest of the toolkit.

The graph is built eagerly: every operation on a :class:`Var` records its
parents and a vector-Jacobian callback. ``backward`` walks the reachable
nodes in reverse creation order (a reverse topological order, since parents
are always created before children), which makes gradient accumulation
bit-reproducible.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DifferentiationError

_NODE_IDS = itertools.count()


def _unbroadcast(g, shape):
    """Sum a gradient down to `shape` after numpy broadcasting."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    """Node in a differentiation graph: an f64 array plus backward wiring."""

    __slots__ = ("value", "parents", "vjp", "op", "nid")

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.nid = next(_NODE_IDS)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def roll(self, shift, axis=-1):
        return roll(self, shift, axis=axis)

    def sum(self, axis=None):
        return vsum(self, axis=axis)

    def mean(self, axis=None):
        return vmean(self, axis=axis)


def as_var(x):
    return x if isinstance(x, Var) else Var(x, op="const")


def _binary(op, fw, vjp_a, vjp_b):
    def f(a, b):
        a, b = as_var(a), as_var(b)
        out = fw(a.value, b.value)

        def vjp(g):
            return (_unbroadcast(vjp_a(g, a.value, b.value, out), a.value.shape),
                    _unbroadcast(vjp_b(g, a.value, b.value, out), b.value.shape))

        return Var(out, (a, b), vjp, op)

    f.__name__ = op
    return f


add = _binary("add", lambda a, b: a + b,
              lambda g, a, b, o: g, lambda g, a, b, o: g)
sub = _binary("sub", lambda a, b: a - b,
              lambda g, a, b, o: g, lambda g, a, b, o: -g)
mul = _binary("mul", lambda a, b: a * b,
              lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)
div = _binary("div", lambda a, b: a / b,
              lambda g, a, b, o: g / b, lambda g, a, b, o: -g * a / (b * b))
maximum = _binary("maximum", np.maximum,
                  lambda g, a, b, o: g * (a >= b), lambda g, a, b, o: g * (a < b))


def neg(a):
    a = as_var(a)
    return Var(-a.value, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_var(a)
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_var(a)
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def tanh(a):
    a = as_var(a)
    out = np.tanh(a.value)
    return Var(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a):
    a = as_var(a)
    out = np.logaddexp(0.0, a.value)

    def vjp(g):
        return (g * (0.5 * (1.0 + np.tanh(0.5 * a.value))),)  # sigmoid(a)

    return Var(out, (a,), vjp, "softplus")


def vsum(a, axis=None):
    a = as_var(a)
    out = np.sum(a.value, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return Var(out, (a,), vjp, "sum")


def vmean(a, axis=None):
    a = as_var(a)
    out = np.mean(a.value, axis=axis)
    count = a.value.size if axis is None else a.value.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.value.shape).copy(),)
        gg = np.expand_dims(g, axis) / count
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return Var(out, (a,), vjp, "mean")


def sumsq(a):
    """Squared Euclidean norm of all entries."""
    a = as_var(a)
    return Var(np.sum(a.value * a.value), (a,), lambda g: (2.0 * g * a.value,), "sumsq")


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ContractViolation("matmul expects two rank-2 tensors")
    out = a.value @ b.value

    def vjp(g):
        return (g @ b.value.T, a.value.T @ g)

    return Var(out, (a, b), vjp, "matmul")


def roll(a, shift, axis=-1):
    """Circular shift along one axis; gradient is the opposite shift."""
    a = as_var(a)
    out = np.roll(a.value, shift, axis=axis)
    return Var(out, (a,), lambda g: (np.roll(g, -shift, axis=axis),), "roll")


def getitem(a, idx):
    a = as_var(a)
    out = a.value[idx]

    def vjp(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        return (full,)

    return Var(out, (a,), vjp, "getitem")


def concat(parts, axis=0):
    parts = [as_var(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return Var(out, tuple(parts), vjp, "concat")


def circular_conv1d(x, w, b):
    """1-D convolution with circular padding over the last axis.

    x: (B, C_in, n) or (C_in, n); w: (C_out, C_in, K); b: (C_out,).
    Output index i gathers x at positions i + k - K//2 (mod n).
    """
    x, w, b = as_var(x), as_var(w), as_var(b)
    xv, wv, bv = x.value, w.value, b.value
    squeeze = xv.ndim == 2
    if squeeze:
        xv = xv[None]
    if xv.ndim != 3 or wv.ndim != 3 or bv.ndim != 1:
        raise ContractViolation("circular_conv1d: bad ranks")
    if xv.shape[1] != wv.shape[1] or wv.shape[0] != bv.shape[0]:
        raise ContractViolation("circular_conv1d: channel mismatch")
    K = wv.shape[2]
    half = K // 2
    stack = np.stack([np.roll(xv, half - k, axis=-1) for k in range(K)], axis=0)
    out = np.einsum("kbcn,ock->bon", stack, wv, optimize=True) + bv[:, None]

    def vjp(g):
        if squeeze:
            gg = g[None]
        else:
            gg = g
        dw = np.einsum("bon,kbcn->ock", gg, stack, optimize=True)
        db = gg.sum(axis=(0, 2))
        back = np.einsum("ock,bon->kbcn", wv, gg, optimize=True)
        dx = np.zeros_like(xv)
        for k in range(K):
            dx += np.roll(back[k], k - half, axis=-1)
        if squeeze:
            dx = dx[0]
        return (dx, dw, db)

    if squeeze:
        out = out[0]
    return Var(out, (x, w, b), vjp, "circular_conv1d")


def check_finite(a, context="value"):
    """Raise if a Var or array contains non-finite entries."""
    v = a.value if isinstance(a, Var) else np.asarray(a)
    if not np.all(np.isfinite(v)):
        op = a.op if isinstance(a, Var) else "array"
        raise DifferentiationError(f"non-finite {context} in op {op!r}", op_kind=op)
    return a


# -- backward pass ---------------------------------------------------------


def _backward_impl(out, wrt):
    """Reverse accumulation in descending node-id order (a reverse
    topological order, since parents are created before children), so
    replays on the same graph are bit-identical."""
    reachable = {}
    stack = [out]
    while stack:
        node = stack.pop()
        if node.nid in reachable:
            continue
        reachable[node.nid] = node
        stack.extend(node.parents)

    grads = {out.nid: np.ones((), dtype=np.float64)}
    wanted = {w.nid for w in wrt}
    for nid in sorted(reachable, reverse=True):
        node = reachable[nid]
        g = grads.get(nid)
        if g is None:
            continue
        if nid not in wanted:
            del grads[nid]
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            pg = np.asarray(pg, dtype=np.float64)
            if not np.all(np.isfinite(pg)):
                raise DifferentiationError(
                    f"non-finite gradient produced by op {node.op!r}",
                    op_kind=node.op)
            acc = grads.get(parent.nid)
            grads[parent.nid] = pg.copy() if acc is None else acc + pg
    return [grads.get(w.nid, np.zeros_like(w.value)) for w in wrt]


def grad_of(out, wrt):
    """Gradient arrays of scalar Var `out` w.r.t. a list of Vars."""
    if out.value.ndim != 0:
        raise ContractViolation("grad_of expects a scalar output")
    if not np.isfinite(out.value):
        raise DifferentiationError(
            f"non-finite primal at output op {out.op!r}", op_kind=out.op)
    return _backward_impl(out, wrt)


def grad(f, at):
    """Evaluate ∂f/∂p at the given point for every parameter p.

    `f` takes len(at) Vars and returns a scalar Var; `at` is a list of
    arrays. Returns gradient arrays with matching shapes.
    """
    params = [Var(a, op="param") for a in at]
    out = f(*params)
    return grad_of(out, params)


def value_and_grad(f, at):
    params = [Var(a, op="param") for a in at]
    out = f(*params)
    return float(out.value), grad_of(out, params)


# -- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moments plus hyperparameters."""

    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    return AdamState(m=zeros, v={k: z.copy() for k, z in zeros.items()},
                     step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns (new_params, state)."""
    state.step += 1
    t = state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ContractViolation(f"adam_step: shape mismatch for {k!r}")
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        mhat = state.m[k] / (1.0 - state.beta1 ** t)
        vhat = state.v[k] / (1.0 - state.beta2 ** t)
        out[k] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return out, state


# -- L-BFGS ----------------------------------------------------------------


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    iters_used: int
    converged: bool
    line_search_failed: bool
    trace: list = field(default_factory=list)


ARMIJO_C = 1e-4
MAX_HALVINGS = 30


def lbfgs_minimize(f, x0, max_iters=5000, memory_size=100, grad_tol=1e-10):
    """Limited-memory BFGS with backtracking Armijo line search.

    `f` maps a Var of x0's shape to a scalar Var. Trial step is 1 (scaled
    by 1/|g|_1 on the very first iteration, before any curvature pairs
    exist), halved until the Armijo condition f(x+t d) <= f + c t gᵀd
    holds. Pairs violating the curvature condition sᵀy > 0 are skipped.
    On line search failure the best iterate so far is returned with a
    warning flag; this never raises.
    """
    shape = np.asarray(x0).shape

    def fg(x_flat):
        v, (g,) = value_and_grad(lambda xv: f(xv), [x_flat.reshape(shape)])
        return v, g.ravel()

    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    fx, g = fg(x)
    trace = [fx]
    s_mem, y_mem, rho_mem = [], [], []
    failed = False
    iters = 0

    for iters in range(1, max_iters + 1):
        gnorm = np.max(np.abs(g)) if g.size else 0.0
        if gnorm < grad_tol:
            return LbfgsResult(x.reshape(shape), fx, iters - 1, True, failed, trace)

        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_mem), reversed(y_mem), reversed(rho_mem)):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        if y_mem:
            gamma = np.dot(s_mem[-1], y_mem[-1]) / np.dot(y_mem[-1], y_mem[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_mem, y_mem, rho_mem), reversed(alphas)):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        d = -q

        gTd = np.dot(g, d)
        if gTd >= 0.0:
            d = -g
            gTd = -np.dot(g, g)
            if gTd == 0.0:
                return LbfgsResult(x.reshape(shape), fx, iters - 1, True, failed, trace)

        t = 1.0
        if not s_mem:
            t = min(1.0, 1.0 / max(np.sum(np.abs(g)), 1e-12))
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            x_new = x + t * d
            try:
                f_new, g_new = fg(x_new)
            except DifferentiationError:
                t *= 0.5
                continue
            if f_new <= fx + ARMIJO_C * t * gTd:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            failed = True
            trace.append(fx)
            return LbfgsResult(x.reshape(shape), fx, iters, False, True, trace)

        s = x_new - x
        y = g_new - g
        sy = np.dot(s, y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_mem.append(s)
            y_mem.append(y)
            rho_mem.append(1.0 / sy)
            if len(s_mem) > memory_size:
                s_mem.pop(0)
                y_mem.pop(0)
                rho_mem.pop(0)

        x, fx, g = x_new, f_new, g_new
        trace.append(fx)

    return LbfgsResult(x.reshape(shape), fx, max_iters, False, failed, trace)
