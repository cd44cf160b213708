"""Reference implementations used only by the tests.

Nothing here imports the library; each function is a direct transcription
of the defining formula, written with plain loops where that stays fast
enough.
"""

import math

import numpy as np


def affine_entries(s, r, tx, ty):
    """The six entries of the similarity matrix, row-major."""
    return [
        s * math.cos(r), -s * math.sin(r), tx * s * math.cos(r) - ty * s * math.sin(r),
        s * math.sin(r), s * math.cos(r), tx * s * math.sin(r) + ty * s * math.cos(r),
    ]


def lattice(W, H):
    out = np.zeros((W, H, 2))
    for i in range(W):
        for j in range(H):
            out[i, j] = ((i + 0.5) / W - 0.5, (j + 0.5) / H - 0.5)
    return out


def grid(theta, W, H):
    """Per-coordinate matrix-vector product on the base lattice."""
    base = lattice(W, H)
    out = np.zeros((W, H, 2))
    for i in range(W):
        for j in range(H):
            x, y = base[i, j]
            out[i, j, 0] = theta[0][0] * x + theta[0][1] * y + theta[0][2]
            out[i, j, 1] = theta[1][0] * x + theta[1][1] * y + theta[1][2]
    return out


def to_pixel(g, extent):
    return g * extent + (extent - 1) / 2


def bilinear_double_sum(U, G):
    """``out[..., a, b] = sum_i sum_j U[..., i, j] hat(Gx - i) hat(Gy - j)``.

    ``U`` is ``(..., W, H)`` and ``G`` is ``(..., W, H, 2)`` with matching
    leading axes (or broadcastable). Every source pixel is visited in
    row-major order, including the ones whose weight is zero.
    """
    U = np.asarray(U, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    W, H = U.shape[-2:]
    px = to_pixel(G[..., 0], W)
    py = to_pixel(G[..., 1], H)
    acc = np.zeros(np.broadcast_shapes(U.shape[:-2] + (1, 1), px.shape))
    for i in range(W):
        for j in range(H):
            u = U[..., i, j][..., None, None]
            acc = acc + u * np.maximum(0.0, 1.0 - np.abs(px - i)) * np.maximum(0.0, 1.0 - np.abs(py - j))
    return acc


def materialize(base, thetas):
    """Dense ``(C_in, D, W, H)`` filter: slice t+1 is slice t resampled by thetas[t]."""
    base = np.asarray(base, dtype=np.float64)
    W, H = base.shape[-2:]
    slices = [base]
    for s, r, tx, ty in thetas:
        e = affine_entries(s, r, tx, ty)
        G = grid([e[:3], e[3:]], W, H)
        slices.append(bilinear_double_sum(slices[-1], G))
    return np.stack(slices, axis=1)


def conv3d_loops(X, Wt, bias=None, stride=(1, 1, 1), pad=(0, 0, 0)):
    """Cross-correlation by explicit loops over outputs and filter taps."""
    X = np.pad(X, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))
    N, C, T, Wd, Hd = X.shape
    O, _, D, KW, KH = Wt.shape
    st, sw, sh = stride
    To, Wo, Ho = (T - D) // st + 1, (Wd - KW) // sw + 1, (Hd - KH) // sh + 1
    Y = np.zeros((N, O, To, Wo, Ho))
    for n in range(N):
        for o in range(O):
            for a in range(To):
                for b in range(Wo):
                    for c in range(Ho):
                        acc = 0.0 if bias is None else float(bias[o])
                        for k in range(C):
                            for t in range(D):
                                for i in range(KW):
                                    for j in range(KH):
                                        acc += Wt[o, k, t, i, j] * X[n, k, a * st + t, b * sw + i, c * sh + j]
                        Y[n, o, a, b, c] = acc
    return Y


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gf[k] = (fp - fm) / (2 * h)
    return g


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def homogeneous(s, r, tx, ty):
    e = affine_entries(s, r, tx, ty)
    return np.array([e[:3], e[3:], [0.0, 0.0, 1.0]])
