"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

The numba path is used by default when numba imports cleanly; set
``IBNORM_NUMBA=0`` in the environment to force the numpy fallback.
``benchmarks/bench_kernels.py`` times the two paths against each other.

Compression kind codes: 0 = linear (S), 1 = logarithmic (L), 2 = tanh (T).
"""

import math
import os

import numpy as np

KIND_S, KIND_L, KIND_T = 0, 1, 2

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _env_wants_numba():
    flag = os.environ.get("IBNORM_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def _f_eval_np(r, lam, kind):
    if kind == KIND_S:
        return r / lam
    if kind == KIND_L:
        return np.log1p(r / lam)
    return np.tanh(r / lam)


def _f_deriv_np(r, lam, kind):
    if kind == KIND_S:
        return np.full_like(r, 1.0 / lam)
    if kind == KIND_L:
        return 1.0 / (lam + r)
    t = np.tanh(r / lam)
    return (1.0 - t * t) / lam


def _dev_compress_np(u, lam, kind):
    return np.sign(u) * _f_eval_np(np.abs(u), lam, kind)


def _dev_compress_deriv_np(u, lam, kind):
    return _f_deriv_np(np.abs(u), lam, kind)


def _pairwise_sq_dists_np(x):
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _kde_eval_np(samples, grid, bw):
    out = np.zeros(grid.shape[0])
    # chunk the grid so the (chunk, n) temporary stays small
    chunk = max(1, int(4e6 // max(samples.size, 1)))
    for s in range(0, grid.size, chunk):
        g = grid[s:s + chunk]
        t = (g[:, None] - samples[None, :]) / bw
        out[s:s + chunk] = np.exp(-0.5 * t * t).sum(axis=1)
    out *= _INV_SQRT_2PI / (samples.size * bw)
    return out


_NUMPY_IMPL = {
    "f_eval": _f_eval_np,
    "f_deriv": _f_deriv_np,
    "dev_compress": _dev_compress_np,
    "dev_compress_deriv": _dev_compress_deriv_np,
    "pairwise_sq_dists": _pairwise_sq_dists_np,
    "kde_eval": _kde_eval_np,
}


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def _build_numba_impl():
    from numba import njit

    @njit(cache=True)
    def f_eval(r, lam, kind):
        out = np.empty_like(r)
        for i in range(r.size):
            if kind == 0:
                out[i] = r[i] / lam
            elif kind == 1:
                out[i] = math.log1p(r[i] / lam)
            else:
                out[i] = math.tanh(r[i] / lam)
        return out

    @njit(cache=True)
    def f_deriv(r, lam, kind):
        out = np.empty_like(r)
        for i in range(r.size):
            if kind == 0:
                out[i] = 1.0 / lam
            elif kind == 1:
                out[i] = 1.0 / (lam + r[i])
            else:
                t = math.tanh(r[i] / lam)
                out[i] = (1.0 - t * t) / lam
        return out

    @njit(cache=True)
    def dev_compress(u, lam, kind):
        out = np.empty_like(u)
        for i in range(u.size):
            a = abs(u[i])
            if kind == 0:
                f = a / lam
            elif kind == 1:
                f = math.log1p(a / lam)
            else:
                f = math.tanh(a / lam)
            if u[i] > 0.0:
                out[i] = f
            elif u[i] < 0.0:
                out[i] = -f
            else:
                out[i] = 0.0
        return out

    @njit(cache=True)
    def dev_compress_deriv(u, lam, kind):
        out = np.empty_like(u)
        for i in range(u.size):
            a = abs(u[i])
            if kind == 0:
                out[i] = 1.0 / lam
            elif kind == 1:
                out[i] = 1.0 / (lam + a)
            else:
                t = math.tanh(a / lam)
                out[i] = (1.0 - t * t) / lam
        return out

    @njit(cache=True)
    def pairwise_sq_dists(x):
        n, d = x.shape
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                acc = 0.0
                for k in range(d):
                    diff = x[i, k] - x[j, k]
                    acc += diff * diff
                out[i, j] = acc
                out[j, i] = acc
        return out

    @njit(cache=True)
    def kde_eval(samples, grid, bw):
        n = samples.size
        out = np.empty(grid.size)
        norm = _INV_SQRT_2PI / (n * bw)
        for j in range(grid.size):
            acc = 0.0
            g = grid[j]
            for i in range(n):
                t = (g - samples[i]) / bw
                acc += math.exp(-0.5 * t * t)
            out[j] = acc * norm
        return out

    return {
        "f_eval": f_eval,
        "f_deriv": f_deriv,
        "dev_compress": dev_compress,
        "dev_compress_deriv": dev_compress_deriv,
        "pairwise_sq_dists": pairwise_sq_dists,
        "kde_eval": kde_eval,
    }


NUMBA_ENABLED = False
_NUMBA_IMPL = None
if _env_wants_numba():
    try:
        _NUMBA_IMPL = _build_numba_impl()
        NUMBA_ENABLED = True
    except ImportError:
        _NUMBA_IMPL = None

# numba wins only where loop fusion beats numpy's vectorized primitives
# (measured in benchmarks/bench_kernels.py); simple elementwise evaluations
# stay on numpy's SIMD path
_NUMBA_HOT = ("dev_compress", "dev_compress_deriv", "kde_eval")
_IMPL = dict(_NUMPY_IMPL)
if NUMBA_ENABLED:
    for _name in _NUMBA_HOT:
        _IMPL[_name] = _NUMBA_IMPL[_name]


def _as_flat(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64)).ravel()


def f_eval(r, lam, kind):
    """f(r) for r >= 0, flattened; caller validates the domain."""
    r = np.asarray(r, dtype=np.float64)
    return _IMPL["f_eval"](_as_flat(r), float(lam), int(kind)).reshape(r.shape)


def f_deriv(r, lam, kind):
    r = np.asarray(r, dtype=np.float64)
    return _IMPL["f_deriv"](_as_flat(r), float(lam), int(kind)).reshape(r.shape)


def dev_compress(u, lam, kind):
    """sign(u) * f(|u|) elementwise."""
    u = np.asarray(u, dtype=np.float64)
    return _IMPL["dev_compress"](_as_flat(u), float(lam), int(kind)).reshape(u.shape)


def dev_compress_deriv(u, lam, kind):
    """d/du of sign(u) * f(|u|), i.e. f'(|u|) (continuous limit at u=0)."""
    u = np.asarray(u, dtype=np.float64)
    return _IMPL["dev_compress_deriv"](_as_flat(u), float(lam), int(kind)).reshape(u.shape)


def pairwise_sq_dists(x):
    """Squared euclidean distances between rows of a 2-D array."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    return _IMPL["pairwise_sq_dists"](x)


def kde_eval(samples, grid, bw):
    """Gaussian-kernel density of `samples` evaluated on `grid`."""
    return _IMPL["kde_eval"](_as_flat(samples), _as_flat(grid), float(bw))


def implementations():
    """(name, impl dict) pairs for benchmarking; numba only if available."""
    pairs = [("numpy", _NUMPY_IMPL)]
    if _NUMBA_IMPL is not None:
        pairs.append(("numba", _NUMBA_IMPL))
    return pairs


def warmup():
    """Trigger one-time JIT compilation of every kernel on tiny inputs."""
    u = np.array([-1.0, 0.0, 2.0])
    for kind in (KIND_S, KIND_L, KIND_T):
        f_eval(np.abs(u), 4.0, kind)
        f_deriv(np.abs(u), 4.0, kind)
        dev_compress(u, 4.0, kind)
        dev_compress_deriv(u, 4.0, kind)
    pairwise_sq_dists(np.eye(3))
    kde_eval(u, u, 1.0)
