"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (direct summation, nested loops,
dense matrices, finite differences) and shares no code with the package
paths it checks.
"""

import numpy as np


def dft_centered_direct(x: np.ndarray, axes=None) -> np.ndarray:
    """Centered orthonormal DFT by direct O(n^2) summation per axis."""
    if axes is None:
        axes = tuple(range(x.ndim))
    out = x.astype(np.complex128)
    for ax in axes:
        n = out.shape[ax]
        c = n // 2
        k = np.arange(n)
        f = np.exp(-2j * np.pi * np.outer(k - c, k - c) / n) / np.sqrt(n)
        out = np.moveaxis(np.tensordot(f, np.moveaxis(out, ax, 0), axes=(1, 0)), 0, ax)
    return out


def conv_same_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation by explicit nested loops (2D)."""
    c_out, c_in = w.shape[0], w.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    h, wd = x.shape[1], x.shape[2]
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(c_in):
            for p in range(h):
                for q in range(wd):
                    acc = 0.0
                    for a in range(kh):
                        for bb in range(kw):
                            pi = p + a - kh // 2
                            qi = q + bb - kw // 2
                            if 0 <= pi < h and 0 <= qi < wd:
                                acc += x[i, pi, qi] * w[o, i, a, bb]
                    out[o, p, q] += acc
        out[o] += b[o]
    return out


def max_prefix_sum(deltas) -> int:
    """Peak of the running sum of signed byte deltas (ledger replay)."""
    peak = 0
    run = 0
    for d in deltas:
        run += d
        peak = max(peak, run)
    return peak


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar f at real array x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def dense_matrix_of(op_apply, shape, dtype=np.complex128) -> np.ndarray:
    """Materialize a linear operator by applying it to basis vectors."""
    n = int(np.prod(shape))
    cols = []
    for j in range(n):
        e = np.zeros(n, dtype=dtype)
        e[j] = 1.0
        cols.append(op_apply(e.reshape(shape)).reshape(-1))
    return np.stack(cols, axis=1)


def conv_circular_norm_exact(w: np.ndarray, spatial: tuple[int, ...]) -> float:
    """Exact spectral norm of the circular-padding conv operator.

    Block-circulant structure: the operator diagonalizes per frequency into
    the kernel's DFT transfer matrix H(f) in C^{C_out x C_in}; the norm is
    the max singular value over frequencies.
    """
    c_out, c_in = w.shape[0], w.shape[1]
    kshape = w.shape[2:]
    nd = len(spatial)
    h = np.zeros((c_out, c_in) + tuple(spatial), dtype=np.complex128)
    for o in range(c_out):
        for i in range(c_in):
            k = np.zeros(spatial)
            # place kernel taps at circular offsets relative to the center
            for idx in np.ndindex(*kshape):
                off = tuple((idx[d] - kshape[d] // 2) % spatial[d] for d in range(nd))
                k[off] += w[(o, i) + idx]
            h[o, i] = np.fft.fftn(k)
    smax = 0.0
    for f in np.ndindex(*spatial):
        m = h[(slice(None), slice(None)) + f]
        smax = max(smax, float(np.linalg.svd(m, compute_uv=False)[0]))
    return smax
