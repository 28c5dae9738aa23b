"""Hot inner-loop kernels: numba-compiled with pure-numpy fallbacks.

The training loop spends nearly all of its non-BLAS time in CSR matrix-vector
products and in the per-edge graph aggregation (forward and backward).  Both
are implemented twice: an ``@njit`` version and a vectorized numpy version.

Backend selection via the ``PDGS_NUMBA`` environment variable, read once at
import:

* unset or ``"auto"``  -- use numba when importable, else numpy
* ``"0"`` / ``"numpy"`` -- force the numpy fallback
* ``"1"`` / ``"numba"`` -- require numba (ImportError if missing)

Both paths are run-to-run deterministic: accumulation order is fixed within
each backend.  ``benchmarks/bench_kernels.py`` times one against the other.
"""

import os

import numpy as np

_FLAG = os.environ.get("PDGS_NUMBA", "auto").lower()

if _FLAG in ("0", "numpy", "off", "false"):
    _HAS_NUMBA = False
elif _FLAG in ("1", "numba", "on", "true"):
    from numba import njit  # noqa: F401  (hard requirement)

    _HAS_NUMBA = True
else:
    try:
        from numba import njit

        _HAS_NUMBA = True
    except ImportError:
        _HAS_NUMBA = False

BACKEND = "numba" if _HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy fallbacks

def _spmv_numpy(offsets, cols, vals, x, out):
    prods = vals * x[cols]
    if prods.size == 0:
        out[:] = 0.0
        return out
    starts = np.minimum(offsets[:-1], prods.size - 1)
    out[:] = np.add.reduceat(prods, starts)
    out[np.diff(offsets) == 0] = 0.0
    return out


def _aggregate_fwd_numpy(offsets, cols, weights, feats, out):
    weighted = feats[cols] * weights[:, None]
    starts = offsets[:-1]
    # topology guarantees no isolated nodes, so every segment is non-empty
    np.add.reduceat(weighted, starts, axis=0, out=out)
    out /= np.diff(offsets)[:, None]
    return out


def _aggregate_bwd_numpy(offsets, cols, weights, upstream, out):
    deg = np.diff(offsets)
    rows = np.repeat(np.arange(len(deg)), deg)
    contrib = upstream[rows] * (weights / deg[rows])[:, None]
    out[:] = 0.0
    np.add.at(out, cols, contrib)
    return out


# ---------------------------------------------------------------------------
# numba kernels (same contracts, explicit loops)

if _HAS_NUMBA:

    @njit(cache=True)
    def _spmv_numba(offsets, cols, vals, x, out):
        for i in range(out.shape[0]):
            acc = 0.0
            for e in range(offsets[i], offsets[i + 1]):
                acc += vals[e] * x[cols[e]]
            out[i] = acc
        return out

    @njit(cache=True)
    def _aggregate_fwd_numba(offsets, cols, weights, feats, out):
        d = feats.shape[1]
        for i in range(out.shape[0]):
            lo, hi = offsets[i], offsets[i + 1]
            for c in range(d):
                acc = 0.0
                for e in range(lo, hi):
                    acc += weights[e] * feats[cols[e], c]
                out[i, c] = acc / (hi - lo)
        return out

    @njit(cache=True)
    def _aggregate_bwd_numba(offsets, cols, weights, upstream, out):
        out[:] = 0.0
        d = upstream.shape[1]
        for i in range(upstream.shape[0]):
            lo, hi = offsets[i], offsets[i + 1]
            inv_deg = 1.0 / (hi - lo)
            for e in range(lo, hi):
                w = weights[e] * inv_deg
                j = cols[e]
                for c in range(d):
                    out[j, c] += w * upstream[i, c]
        return out

    spmv_into = _spmv_numba
    aggregate_fwd_into = _aggregate_fwd_numba
    aggregate_bwd_into = _aggregate_bwd_numba
else:
    spmv_into = _spmv_numpy
    aggregate_fwd_into = _aggregate_fwd_numpy
    aggregate_bwd_into = _aggregate_bwd_numpy
