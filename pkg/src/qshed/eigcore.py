"""Symmetric eigendecomposition and (q, rho)-Hessian approximations.

The eigensolver is a cyclic Jacobi method using the round-robin (tournament)
pair ordering: each of the ``m - 1`` steps of a sweep applies ``m / 2``
disjoint plane rotations at once, which lets numpy vectorise the sweep while
keeping the rotation order fixed and the result deterministic.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, NumericalFailure

MAX_SWEEPS = 100
OFF_TOL = 1e-12


def as_symmetric(a):
    """Validate ``a`` as a finite square matrix and return ``(a + a.T) / 2``.

    The returned array is read-only so it can be shared freely.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise InvalidInput(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput("matrix has non-finite entries")
    s = 0.5 * (a + a.T)
    s.setflags(write=False)
    return s


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns are unit eigenvectors
    sweeps: int = 0

    @property
    def n(self):
        return self.eigenvalues.shape[0]

    def reconstruct(self):
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _round_robin(m):
    """Pairings for one sweep of a tournament ordering on ``m`` (even) indices."""
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        half = m // 2
        p = players[:half]
        q = players[half:][::-1]
        rounds.append((np.array(p), np.array(q)))
        # keep player 0 fixed, rotate the rest
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_norm(a):
    off = a - np.diag(np.diag(a))
    return np.sqrt(np.sum(off * off))


def eigendecompose(h, max_sweeps=MAX_SWEEPS, tol=OFF_TOL):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues are returned in descending order; ties keep the original
    column order. Each eigenvector is signed so that its largest-magnitude
    component (lowest index on ties) is positive.
    """
    h = as_symmetric(h)
    n = h.shape[0]
    a = np.array(h, dtype=np.float64)
    v = np.eye(n)
    scale = np.linalg.norm(h)
    threshold = tol * scale

    sweeps = 0
    if n > 1 and scale > 0:
        m = n + (n % 2)
        schedule = _round_robin(m)
        if m != n:
            # drop pairs that involve the padding index
            schedule = [(p[(p < n) & (q < n)], q[(p < n) & (q < n)]) for p, q in schedule]
        while _off_norm(a) > threshold:
            if sweeps >= max_sweeps:
                raise NumericalFailure(
                    f"Jacobi did not converge in {max_sweeps} sweeps", residual=_off_norm(a)
                )
            for p, q in schedule:
                apq = a[p, q]
                active = apq != 0.0
                if not np.any(active):
                    continue
                p, q, apq = p[active], q[active], apq[active]
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # A <- J^T A J, V <- V J
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = ap * c - aq * s
                a[:, q] = ap * s + aq * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c[:, None] * rp - s[:, None] * rq
                a[q, :] = s[:, None] * rp + c[:, None] * rq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = vp * c - vq * s
                v[:, q] = vp * s + vq * c
            sweeps += 1

    lam = np.diag(a).copy()
    order = np.lexsort((np.arange(n), -lam))
    lam = lam[order]
    v = v[:, order]
    # re-normalise against accumulated rounding
    v /= np.linalg.norm(v, axis=0)
    pivot = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[pivot, np.arange(n)] < 0, -1.0, 1.0)
    v *= signs
    lam.setflags(write=False)
    v.setflags(write=False)
    return EigenDecomposition(lam, v, sweeps)


def approx_parameter(eigenvalues, q):
    """rho_q = lambda_{q+1} for q < n, and 0 at q = n."""
    n = len(eigenvalues)
    if not 0 <= q <= n:
        raise InvalidInput(f"q must lie in [0, {n}], got {q}")
    return float(eigenvalues[q]) if q < n else 0.0


@dataclass(frozen=True)
class HessianApprox:
    """Low-rank-plus-identity approximation sum (lam_i - rho) w_i w_i^T + rho I.

    ``vectors`` may hold quantized or exact eigenvectors; a ``None`` entry
    stands for a vector that received no bits and is treated as zero.
    """

    q: int
    rho: float
    eigenvalues: tuple
    vectors: tuple
    n: int

    def matrix(self):
        return lowrank_plus_identity(self.eigenvalues, self.rho, self.vectors, self.n)


def lowrank_plus_identity(eigenvalues, rho, vectors, n):
    out = rho * np.eye(n)
    for lam, w in zip(eigenvalues, vectors):
        if w is None:
            continue
        w = np.asarray(w, dtype=np.float64)
        out += (lam - rho) * np.outer(w, w)
    out = 0.5 * (out + out.T)
    out.setflags(write=False)
    return out


def assemble_approx(eig, q, vectors):
    """Materialise the (q, rho_q) approximation built from ``vectors``."""
    n = eig.n
    if not 0 <= q <= n:
        raise InvalidInput(f"q must lie in [0, {n}], got {q}")
    vectors = list(vectors)
    if len(vectors) != q:
        raise InvalidInput(f"expected {q} vectors, got {len(vectors)}")
    for w in vectors:
        if w is not None and np.shape(w) != (n,):
            raise InvalidInput(f"vector of shape {np.shape(w)} does not match dimension {n}")
    rho = approx_parameter(eig.eigenvalues, q)
    approx = HessianApprox(q, rho, tuple(eig.eigenvalues[:q]), tuple(vectors), n)
    return approx.matrix()


def exact_approx(eig, q):
    return assemble_approx(eig, q, [eig.eigenvectors[:, i] for i in range(q)])


def frobenius_error(h, h_hat):
    """Squared Frobenius distance ||h - h_hat||_F^2."""
    h = np.asarray(h, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    if h.shape != h_hat.shape:
        raise InvalidInput(f"dimension mismatch: {h.shape} vs {h_hat.shape}")
    d = h - h_hat
    return float(np.sum(d * d))
