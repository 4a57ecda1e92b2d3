"""Compiled stepping loop for the geodesic random walk on spheres and hyperboloids.

Same arithmetic as geometry.transport_frame followed by geometry.gram_schmidt,
fused so that long walks do not allocate temporaries at every step.
"""
import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:            # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap

BLOCK = 64


@njit(cache=True)
def embedded_walk(lorentz, r, p0, u0, pidx, inc, iidx, record, out_p, out_u):
    """Walk M paths; path i starts at p0[pidx[i]], u0[pidx[i]] and is driven by inc[iidx[i]].

    p0 (S, dim), u0 (S, dim, n), inc (I, K, n); record is a sorted index array.
    Writes the states at the recorded step indices into out_p (M, R, dim) and
    out_u (M, R, dim, n).  Paths advance in blocks of BLOCK so that the
    independent per-path updates of one step can overlap in the pipeline.
    """
    M = pidx.shape[0]
    K = inc.shape[1]
    n = inc.shape[2]
    dim = p0.shape[1]
    r2 = r * r
    sg = -1.0 if lorentz else 1.0
    B = BLOCK
    P = np.empty((B, dim))
    U = np.empty((B, dim, n))
    disp = np.empty(dim)
    q = np.empty(dim)
    vhat = np.empty(dim)
    vnew = np.empty(dim)
    coef = np.empty(n)
    for start in range(0, M, B):
        stop = min(start + B, M)
        nb = stop - start
        for b in range(nb):
            sp = pidx[start + b]
            for d in range(dim):
                P[b, d] = p0[sp, d]
                for k in range(n):
                    U[b, d, k] = u0[sp, d, k]
        j = 0
        if record.shape[0] > 0 and record[0] == 0:
            for b in range(nb):
                for d in range(dim):
                    out_p[start + b, 0, d] = P[b, d]
                    for k in range(n):
                        out_u[start + b, 0, d, k] = U[b, d, k]
            j = 1
        for step in range(K):
            for b in range(nb):
                ip = iidx[start + b]
                dd = 0.0
                for d in range(dim):
                    acc = 0.0
                    for k in range(n):
                        acc += U[b, d, k] * inc[ip, step, k]
                    disp[d] = acc
                    dd += acc * acc
                if lorentz:
                    dd -= 2.0 * disp[0] * disp[0]
                if dd < 0.0:
                    dd = 0.0
                theta = np.sqrt(dd) / r
                if lorentz:
                    c = np.cosh(theta)
                    s = np.sinh(theta)
                else:
                    c = np.cos(theta)
                    s = np.sin(theta)
                inv = 1.0 / (r * theta) if theta > 0 else 0.0
                qq = 0.0
                for d in range(dim):
                    vhat[d] = disp[d] * inv
                    q[d] = c * P[b, d] + r * s * vhat[d]
                    qq += q[d] * q[d]
                if lorentz:
                    qq -= 2.0 * q[0] * q[0]
                scale = r / np.sqrt(sg * qq)
                for d in range(dim):
                    q[d] *= scale
                    vnew[d] = -sg * s * P[b, d] / r + c * vhat[d]
                for k in range(n):
                    acc = 0.0
                    for d in range(dim):
                        acc += U[b, d, k] * vhat[d]
                    if lorentz:
                        acc -= 2.0 * U[b, 0, k] * vhat[0]
                    coef[k] = acc
                for k in range(n):
                    pc = 0.0
                    for d in range(dim):
                        U[b, d, k] += (vnew[d] - vhat[d]) * coef[k]
                        pc += q[d] * U[b, d, k]
                    if lorentz:
                        pc -= 2.0 * q[0] * U[b, 0, k]
                    pc = sg * pc / r2
                    for d in range(dim):
                        U[b, d, k] -= pc * q[d]
                for i in range(n):
                    for jj in range(i):
                        g = 0.0
                        for d in range(dim):
                            g += U[b, d, jj] * U[b, d, i]
                        if lorentz:
                            g -= 2.0 * U[b, 0, jj] * U[b, 0, i]
                        for d in range(dim):
                            U[b, d, i] -= g * U[b, d, jj]
                    nn = 0.0
                    for d in range(dim):
                        nn += U[b, d, i] * U[b, d, i]
                    if lorentz:
                        nn -= 2.0 * U[b, 0, i] * U[b, 0, i]
                    inv = 1.0 / np.sqrt(nn)
                    for d in range(dim):
                        U[b, d, i] *= inv
                for d in range(dim):
                    P[b, d] = q[d]
            if j < record.shape[0] and record[j] == step + 1:
                for b in range(nb):
                    for d in range(dim):
                        out_p[start + b, j, d] = P[b, d]
                        for k in range(n):
                            out_u[start + b, j, d, k] = U[b, d, k]
                j += 1
