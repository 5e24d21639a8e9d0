"""Dense eigenvalue routines for small matrices.

General real matrices go through a Householder reduction to upper Hessenberg
form followed by the Francis double-shift QR iteration. Symmetric matrices use
cyclic Jacobi rotations, which also give eigenvectors. Spectral norms are the
square root of the top eigenvalue of M^T M.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import EigenNotConverged


def hessenberg(A) -> np.ndarray:
    """Orthogonally similar upper Hessenberg form of ``A``."""
    H = np.array(A, dtype=float, copy=True)
    n = H.shape[0]
    if H.shape != (n, n):
        raise ValueError("matrix must be square")
    for k in range(n - 2):
        x = H[k + 1:, k].copy()
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        v = x
        v[0] += math.copysign(alpha, x[0])
        vnorm = np.linalg.norm(v)
        if vnorm == 0.0:
            continue
        v /= vnorm
        H[k + 1:, :] -= 2.0 * np.outer(v, v @ H[k + 1:, :])
        H[:, k + 1:] -= 2.0 * np.outer(H[:, k + 1:] @ v, v)
        H[k + 2:, k] = 0.0
    return H


def _sign(a, b):
    return abs(a) if b >= 0 else -abs(a)


def _hqr(h: np.ndarray, max_its: int = 60):
    """Eigenvalues of an upper Hessenberg matrix (Francis double shift).

    Works on a 1-based padded copy so the index bookkeeping stays close to the
    textbook formulation.
    """
    n = h.shape[0]
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = h
    wr = np.zeros(n + 1)
    wi = np.zeros(n + 1)
    anorm = 0.0
    for i in range(1, n + 1):
        for j in range(max(i - 1, 1), n + 1):
            anorm += abs(a[i, j])
    nn = n
    t = 0.0
    while nn >= 1:
        its = 0
        while True:
            l = nn
            while l >= 2:
                s = abs(a[l - 1, l - 1]) + abs(a[l, l])
                if s == 0.0:
                    s = anorm
                if abs(a[l, l - 1]) + s == s:
                    a[l, l - 1] = 0.0
                    break
                l -= 1
            x = a[nn, nn]
            if l == nn:
                wr[nn] = x + t
                wi[nn] = 0.0
                nn -= 1
            else:
                y = a[nn - 1, nn - 1]
                w = a[nn, nn - 1] * a[nn - 1, nn]
                if l == nn - 1:
                    p = 0.5 * (y - x)
                    q = p * p + w
                    z = math.sqrt(abs(q))
                    x += t
                    if q >= 0.0:
                        z = p + _sign(z, p)
                        wr[nn - 1] = wr[nn] = x + z
                        if z != 0.0:
                            wr[nn] = x - w / z
                        wi[nn - 1] = wi[nn] = 0.0
                    else:
                        wr[nn - 1] = wr[nn] = x + p
                        wi[nn - 1] = -z
                        wi[nn] = z
                    nn -= 2
                else:
                    if its == max_its:
                        raise EigenNotConverged("Francis QR iteration did not converge")
                    if its in (10, 20, 30, 40, 50):
                        t += x
                        for i in range(1, nn + 1):
                            a[i, i] -= x
                        s = abs(a[nn, nn - 1]) + abs(a[nn - 1, nn - 2])
                        x = y = 0.75 * s
                        w = -0.4375 * s * s
                    its += 1
                    m = nn - 2
                    while m >= l:
                        z = a[m, m]
                        r = x - z
                        s = y - z
                        p = (r * s - w) / a[m + 1, m] + a[m, m + 1]
                        q = a[m + 1, m + 1] - z - r - s
                        r = a[m + 2, m + 1]
                        s = abs(p) + abs(q) + abs(r)
                        p /= s
                        q /= s
                        r /= s
                        if m == l:
                            break
                        u = abs(a[m, m - 1]) * (abs(q) + abs(r))
                        v = abs(p) * (abs(a[m - 1, m - 1]) + abs(z) + abs(a[m + 1, m + 1]))
                        if u + v == v:
                            break
                        m -= 1
                    for i in range(m + 2, nn + 1):
                        a[i, i - 2] = 0.0
                        if i != m + 2:
                            a[i, i - 3] = 0.0
                    for k in range(m, nn):
                        if k != m:
                            p = a[k, k - 1]
                            q = a[k + 1, k - 1]
                            r = 0.0
                            if k != nn - 1:
                                r = a[k + 2, k - 1]
                            x = abs(p) + abs(q) + abs(r)
                            if x != 0.0:
                                p /= x
                                q /= x
                                r /= x
                        s = _sign(math.sqrt(p * p + q * q + r * r), p)
                        if s != 0.0:
                            if k == m:
                                if l != m:
                                    a[k, k - 1] = -a[k, k - 1]
                            else:
                                a[k, k - 1] = -s * x
                            p += s
                            x = p / s
                            y = q / s
                            z = r / s
                            q /= p
                            r /= p
                            # row transformation on columns k..nn
                            rows_p = a[k, k:nn + 1] + q * a[k + 1, k:nn + 1]
                            if k != nn - 1:
                                rows_p = rows_p + r * a[k + 2, k:nn + 1]
                                a[k + 2, k:nn + 1] -= rows_p * z
                            a[k + 1, k:nn + 1] -= rows_p * y
                            a[k, k:nn + 1] -= rows_p * x
                            mmin = nn if nn < k + 3 else k + 3
                            cols_p = x * a[l:mmin + 1, k] + y * a[l:mmin + 1, k + 1]
                            if k != nn - 1:
                                cols_p = cols_p + z * a[l:mmin + 1, k + 2]
                                a[l:mmin + 1, k + 2] -= cols_p * r
                            a[l:mmin + 1, k + 1] -= cols_p * q
                            a[l:mmin + 1, k] -= cols_p
            if not (nn >= 1 and l < nn - 1):
                break
    return wr[1:] + 1j * wi[1:]


def _balance(A: np.ndarray) -> np.ndarray:
    # diagonal similarity scaling by powers of two; leaves eigenvalues unchanged
    a = A.copy()
    n = a.shape[0]
    radix = 2.0
    sqrdx = radix * radix
    done = False
    while not done:
        done = True
        for i in range(n):
            r = np.sum(np.abs(a[i, :])) - abs(a[i, i])
            c = np.sum(np.abs(a[:, i])) - abs(a[i, i])
            if c != 0.0 and r != 0.0:
                g = r / radix
                f = 1.0
                s = c + r
                while c < g:
                    f *= radix
                    c *= sqrdx
                while c > r * radix:
                    f /= radix
                    c /= sqrdx
                if (c + r) / f < 0.95 * s:
                    done = False
                    a[i, :] /= f
                    a[:, i] *= f
    return a


def eigvals(A) -> np.ndarray:
    """All eigenvalues of a real square matrix, complex dtype, sorted by (real, imag)."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    n = A.shape[0]
    if n == 0:
        return np.zeros(0, dtype=complex)
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    ev = _hqr(hessenberg(_balance(A)))
    return ev[np.lexsort((ev.imag, ev.real))]


def eigh(S, tol: float = 1e-15, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(values, vectors)`` with values ascending and ``vectors[:, i]``
    the eigenvector for ``values[i]``. Only the symmetric part of ``S`` is used.
    """
    A = np.asarray(S, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    scale = np.linalg.norm(A)
    if scale == 0.0 or n == 1:
        vals = np.diag(A).copy()
        return vals, V
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = _sign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        raise EigenNotConverged("Jacobi sweeps did not converge")
    vals = np.diag(A).copy()
    order = np.argsort(vals)
    return vals[order], V[:, order]


def eigvalsh(S) -> np.ndarray:
    return eigh(S)[0]


def spectral_norm(M) -> float:
    """Largest singular value, sqrt(lambda_max(M^T M))."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    G = M.T @ M if M.shape[0] >= M.shape[1] else M @ M.T
    return math.sqrt(max(eigvalsh(G)[-1], 0.0))


def smallest_singular_value(M) -> float:
    M = np.asarray(M, dtype=float)
    return math.sqrt(max(eigvalsh(M.T @ M)[0], 0.0))


def range_basis(S, rel_tol: float = 1e-10):
    """Orthonormal basis of the range of a symmetric PSD matrix and the kept eigenvalues."""
    vals, vecs = eigh(S)
    cutoff = rel_tol * max(abs(vals[-1]), 1e-300)
    keep = vals > cutoff
    return vecs[:, keep], vals[keep]
