"""Hot inner-loop kernels, numba-jitted with a pure-numpy fallback.

Set SEQDISTILL_PURE_NUMPY=1 to force the numpy path (the fallback is also
used automatically when numba is not importable). Both paths perform the
same floating-point operations in the same order, so results are
bit-identical; ``benchmarks/bench_kernels.py`` compares their speed.
"""

import math
import os

import numpy as np

_FORCE_NUMPY = os.environ.get("SEQDISTILL_PURE_NUMPY", "") not in ("", "0")

try:
    if _FORCE_NUMPY:
        raise ImportError("SEQDISTILL_PURE_NUMPY set")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


# ---------------------------------------------------------------------------
# scatter-add (embedding-gather backward)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _scatter_add_rows_jit(out, ids, rows):
    n, d = rows.shape
    for i in range(n):
        r = ids[i]
        for j in range(d):
            out[r, j] += rows[i, j]


def _scatter_add_rows_np(out, ids, rows):
    # np.add.at applies updates sequentially in index order, matching the loop
    np.add.at(out, ids, rows)


def scatter_add_rows(out, ids, rows):
    """out[ids[i], :] += rows[i, :] for every i, duplicates accumulated."""
    if HAVE_NUMBA:
        _scatter_add_rows_jit(out, ids.astype(np.int64), rows)
    else:
        _scatter_add_rows_np(out, ids, rows)


# ---------------------------------------------------------------------------
# fused Adam update
# ---------------------------------------------------------------------------


@njit(cache=True)
def _adam_update_jit(value, grad, m, v, bc1, bc2, lr, b1, b2, eps):
    # all intermediate math in f64 with rounded stores, so the f32 case is
    # bit-identical to the numpy fallback below
    n = value.shape[0]
    for i in range(n):
        g = np.float64(grad[i])
        m[i] = b1 * np.float64(m[i]) + (1.0 - b1) * g
        v[i] = b2 * np.float64(v[i]) + (1.0 - b2) * (g * g)
        upd = (lr * (np.float64(m[i]) / bc1)) / (
            math.sqrt(np.float64(v[i]) / bc2) + eps
        )
        value[i] = np.float64(value[i]) - upd


def _adam_update_np(value, grad, m, v, bc1, bc2, lr, b1, b2, eps):
    g = grad.astype(np.float64)
    m[:] = b1 * m.astype(np.float64) + (1.0 - b1) * g
    v[:] = b2 * v.astype(np.float64) + (1.0 - b2) * (g * g)
    upd = (lr * (m.astype(np.float64) / bc1)) / (
        np.sqrt(v.astype(np.float64) / bc2) + eps
    )
    value[:] = value.astype(np.float64) - upd


def adam_update(value, grad, m, v, t, lr, b1, b2, eps):
    """In-place bias-corrected Adam step on flat f64/f32 views; t >= 1."""
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    if HAVE_NUMBA:
        _adam_update_jit(value, grad, m, v, bc1, bc2, lr, b1, b2, eps)
    else:
        _adam_update_np(value, grad, m, v, bc1, bc2, lr, b1, b2, eps)


# ---------------------------------------------------------------------------
# Markov sequence walk
# ---------------------------------------------------------------------------


@njit(cache=True)
def _markov_walk_jit(succ, p, starts, u01, out):
    num_items = succ.shape[0]
    n_users, length = out.shape
    for u in range(n_users):
        cur = starts[u]
        out[u, 0] = cur
        for k in range(1, length):
            r = u01[u, k - 1]
            nxt = succ[cur]
            if r >= p:
                # residual uniform draw over the items other than succ[cur]
                q = (r - p) / (1.0 - p)
                j = int(q * (num_items - 1))
                if j > num_items - 2:
                    j = num_items - 2
                if j >= nxt:
                    j += 1
                nxt = j
            out[u, k] = nxt
            cur = nxt


def _markov_walk_np(succ, p, starts, u01, out):
    num_items = succ.shape[0]
    n_users, length = out.shape
    for u in range(n_users):
        cur = starts[u]
        out[u, 0] = cur
        for k in range(1, length):
            r = u01[u, k - 1]
            nxt = succ[cur]
            if r >= p:
                q = (r - p) / (1.0 - p)
                j = int(q * (num_items - 1))
                if j > num_items - 2:
                    j = num_items - 2
                if j >= nxt:
                    j += 1
                nxt = j
            out[u, k] = int(nxt)
            cur = out[u, k]


def markov_walk(succ, p, starts, u01):
    """Generate item walks: follow succ[cur] w.p. p, else uniform over others.

    succ: (I,) successor permutation; starts: (U,) first items;
    u01: (U, L-1) pre-drawn uniforms. Returns (U, L) int64 item indices.
    Sequences of length 1 consume no uniforms.
    """
    n_users = starts.shape[0]
    length = u01.shape[1] + 1
    out = np.zeros((n_users, length), dtype=np.int64)
    if HAVE_NUMBA:
        _markov_walk_jit(
            succ.astype(np.int64), float(p), starts.astype(np.int64),
            u01.astype(np.float64), out,
        )
    else:
        _markov_walk_np(succ, float(p), starts, u01, out)
    return out
