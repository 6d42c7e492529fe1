"""Shared test utilities: independent finite-difference oracle."""

import numpy as np

from assimlab import diffcore as dc


def fd_grad(f, x, eps=1e-6):
    """Central finite differences of a scalar function of one array.

    `f` takes a plain numpy array and returns a float. Independent of the
    autodiff path it is used to check.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.abs(a), np.abs(b))
    denom = np.where(denom == 0.0, 1.0, denom)
    return float(np.max(np.abs(a - b) / denom))


def check_grad_matches_fd(build, x, eps=1e-6, tol=1e-6):
    """Compare autodiff gradient of build(Var)->scalar Var against central
    finite differences on the same point."""
    _, (g,) = dc.value_and_grad(build, [x])
    fd = fd_grad(lambda xv: float(build(dc.Var(xv)).value), x, eps=eps)
    return rel_err(g, fd), g, fd


def fd_grad5(f, x, eps=1e-3):
    """Fourth-order central differences (five-point stencil) of a scalar
    function; O(eps^4) truncation error lets eps stay large enough that
    floating-point cancellation is negligible."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index

        def at(h):
            xp = x.copy()
            xp[idx] += h
            return f(xp)

        g[idx] = (8.0 * (at(eps) - at(-eps))
                  - (at(2 * eps) - at(-2 * eps))) / (12.0 * eps)
    return g


def norm_rel_err(a, b):
    """Relative error between gradient vectors in the Euclidean norm."""
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def check_grad_matches_fd5(build, x, eps=1e-3):
    """Norm relative error between the autodiff gradient and a five-point
    finite-difference stencil."""
    _, (g,) = dc.value_and_grad(build, [x])
    fd = fd_grad5(lambda xv: float(build(dc.Var(xv)).value), x, eps=eps)
    return norm_rel_err(g, fd), g, fd
