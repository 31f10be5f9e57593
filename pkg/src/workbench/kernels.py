"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

The backend is picked once at import time from ``WORKBENCH_BACKEND``
(``numba`` or ``numpy``). When unset, numba is used if it imports.
Every caller goes through the module-level names below, so the eager and
taped code paths always share one kernel and produce identical bits.
"""

import os

import numpy as np

# Below this many multiply-adds the explicit loop beats a BLAS call.
SMALL_GEMM = 8192

_requested = os.environ.get("WORKBENCH_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ImportError(f"WORKBENCH_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

HAVE_NUMBA = False
if _requested != "numpy":
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - depends on environment
        if _requested == "numba":
            raise

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------


def affine_numpy(x, W, b):
    return x @ W + b


def affine_backward_numpy(g, x, W):
    return g @ W.T, x.T @ g, g.sum(axis=0)


def project_linf_numpy(x_adv, x, eps):
    out = np.minimum(np.maximum(x_adv, x - eps), x + eps)
    return np.clip(out, 0.0, 1.0)


def project_l2_numpy(x_adv, x, eps):
    # radial scaling then box clamp, applied twice
    out = x_adv
    for _ in range(2):
        delta = out - x
        norm = np.sqrt((delta * delta).sum(axis=1, keepdims=True))
        scale = np.minimum(1.0, eps / np.maximum(norm, 1e-300))
        out = np.clip(x + delta * scale, 0.0, 1.0)
    return out


def sign_numpy(g):
    return np.sign(g)


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _affine_nb(x, W, b):
        n, d = x.shape
        h = W.shape[1]
        if n * d * h > SMALL_GEMM:
            out = np.dot(x, W)
            for i in range(n):
                for j in range(h):
                    out[i, j] += b[j]
            return out
        out = np.empty((n, h))
        for i in range(n):
            for j in range(h):
                s = 0.0
                for k in range(d):
                    s += x[i, k] * W[k, j]
                out[i, j] = s + b[j]
        return out

    @njit(cache=True)
    def _affine_backward_nb(g, x, W):
        n, h = g.shape
        d = x.shape[1]
        gb = np.zeros(h)
        for i in range(n):
            for j in range(h):
                gb[j] += g[i, j]
        if n * d * h > SMALL_GEMM:
            return np.dot(g, W.T), np.dot(x.T, g), gb
        gx = np.zeros((n, d))
        gW = np.zeros((d, h))
        for i in range(n):
            for k in range(d):
                s = 0.0
                for j in range(h):
                    s += g[i, j] * W[k, j]
                    gW[k, j] += x[i, k] * g[i, j]
                gx[i, k] = s
        return gx, gW, gb

    @njit(cache=True)
    def _project_linf_nb(x_adv, x, eps):
        n, d = x.shape
        out = np.empty((n, d))
        for i in range(n):
            for k in range(d):
                v = x_adv[i, k]
                lo = x[i, k] - eps
                hi = x[i, k] + eps
                if v < lo:
                    v = lo
                if v > hi:
                    v = hi
                if v < 0.0:
                    v = 0.0
                if v > 1.0:
                    v = 1.0
                out[i, k] = v
        return out

    @njit(cache=True)
    def _project_l2_nb(x_adv, x, eps):
        n, d = x.shape
        out = x_adv.copy()
        for _ in range(2):
            for i in range(n):
                s = 0.0
                for k in range(d):
                    t = out[i, k] - x[i, k]
                    s += t * t
                norm = np.sqrt(s)
                scale = 1.0
                if norm > 0.0 and eps / norm < 1.0:
                    scale = eps / norm
                for k in range(d):
                    v = x[i, k] + (out[i, k] - x[i, k]) * scale
                    if v < 0.0:
                        v = 0.0
                    if v > 1.0:
                        v = 1.0
                    out[i, k] = v
        return out

    @njit(cache=True)
    def _sign_nb(g):
        out = np.empty_like(g)
        flat_in = g.ravel()
        flat_out = out.ravel()
        for i in range(flat_in.size):
            v = flat_in[i]
            flat_out[i] = 1.0 if v > 0.0 else (-1.0 if v < 0.0 else 0.0)
        return out

    def _c(a):
        return np.ascontiguousarray(a, dtype=np.float64)

    def affine(x, W, b):
        return _affine_nb(_c(x), _c(W), _c(b))

    def affine_backward(g, x, W):
        return _affine_backward_nb(_c(g), _c(x), _c(W))

    def project_linf(x_adv, x, eps):
        return _project_linf_nb(_c(x_adv), _c(x), float(eps))

    def project_l2(x_adv, x, eps):
        return _project_l2_nb(_c(x_adv), _c(x), float(eps))

    def sign(g):
        return _sign_nb(_c(g))

else:
    affine = affine_numpy
    affine_backward = affine_backward_numpy
    project_linf = project_linf_numpy
    project_l2 = project_l2_numpy
    sign = sign_numpy


def project(x_adv, x, p, eps):
    """Project onto the ℓp ball of radius ``eps`` around ``x`` intersected with [0,1]^d."""
    if p == "inf":
        return project_linf(x_adv, x, eps)
    if p == "2":
        return project_l2(x_adv, x, eps)
    raise ValueError(f"unsupported norm {p!r}")
