"""Brute-force and Monte-Carlo reference computations.

Nothing here imports the quantizer or the allocation solver: the cost
function, the dithered quantizer and the search procedures are written out
again from scratch so that tests compare two independent implementations.
"""
from dataclasses import dataclass
import itertools
import math

import numpy as np

from .errors import InvalidInput, Unsupported

# ---------------------------------------------------------------------------
# trial counts and tolerances shared by tests and ``qshed verify``

MOMENT_DRAWS = 1_000_000
MOMENT_BITS = (1, 2, 3, 4)
MOMENT_VAR_RTOL = 0.01
MOMENT_FOURTH_RTOL = 0.02

ERROR_LAW_INSTANCES = 20
ERROR_LAW_TRIALS = 100_000
ERROR_LAW_SIGMAS = 3.0
ERROR_LAW_RTOL = 0.02

CONVEXITY_INSTANCES = 100
CONVEXITY_MAX_N = 10 ** 6

KKT_INSTANCES = 100
KKT_TOL = 1e-10

GRID_POINTS = 41
GRID_COST_TOL = 1e-6
BUDGET_TOL = 1e-8
INTEGER_COST_BAND = 0.05

MC_MIN_TRIALS = 10_000
MC_BATCH = 5_000
MAX_GRID_Q = 3
MAX_ENUM_Q = 6
MAX_ENUM_B = 12


# ---------------------------------------------------------------------------
# reference cost


def _coefficients(n):
    c1 = (n + 1) / 6
    c2 = n / 80 + n * (n - 1) / 144
    c3 = n / 144
    return c1, c2, c3


def _spectrum_terms(eigenvalues, q):
    lam = [float(v) for v in eigenvalues]
    n = len(lam)
    rho = lam[q] if q < n else 0.0
    lbar = [lam[i] - rho for i in range(q)]
    d = sum(rho - lam[i] for i in range(q, n)) / 6
    trunc = sum((lam[i] - rho) ** 2 for i in range(q, n))
    c1, _, _ = _coefficients(n)
    gamma = [d * lb + c1 * lb * lb for lb in lbar]
    return lbar, gamma, trunc


def reference_cost(eigenvalues, q, x):
    """Expected squared Frobenius error, evaluated term by term."""
    n = len(eigenvalues)
    lbar, gamma, trunc = _spectrum_terms(eigenvalues, q)
    _, c2, c3 = _coefficients(n)
    total = trunc
    for i in range(q):
        total += gamma[i] * x[i] + c2 * lbar[i] ** 2 * x[i] ** 2
        for j in range(q):
            if j != i:
                total += c3 * lbar[i] * lbar[j] * x[i] * x[j]
    return total


# ---------------------------------------------------------------------------
# Monte-Carlo error of the quantized approximation


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    trials: int


def _spectral(eig):
    if hasattr(eig, "eigenvalues"):
        return np.asarray(eig.eigenvalues, dtype=float), np.asarray(eig.eigenvectors, dtype=float)
    lam, vecs = eig
    return np.asarray(lam, dtype=float), np.asarray(vecs, dtype=float)


def _dithered(v, bits, rng):
    """Batch of dithered reconstructions of ``v``: shape (trials, n)."""
    levels = 2 ** bits
    step = 2.0 / levels
    u = rng.uniform(-step / 2, step / 2, size=v.shape)
    cell = np.floor((v + u + 1.0) / step)
    cell = np.clip(cell, 0, levels - 1)
    return np.clip(-1.0 + (cell + 0.5) * step - u, -1.0, 1.0)


def mc_frobenius_error(eig, q, bits, trials=MC_MIN_TRIALS, seed=0):
    """Sample mean and standard error of ``||H - H_hat||_F^2`` over dither draws.

    ``eig`` is an eigendecomposition (or a ``(eigenvalues, eigenvectors)``
    pair); eigenvector ``i < q`` is quantized with ``bits[i]`` bits, zero
    bits meaning the vector is not sent at all.
    """
    lam, vecs = _spectral(eig)
    n = lam.size
    bits = [int(b) for b in bits]
    if len(bits) != q or not 0 <= q <= n:
        raise InvalidInput("need one bit count per kept eigenvector")
    if trials < MC_MIN_TRIALS:
        raise InvalidInput(f"at least {MC_MIN_TRIALS} trials are required")
    h = (vecs * lam) @ vecs.T
    rho = lam[q] if q < n else 0.0
    rng = np.random.default_rng(seed)
    samples = []
    done = 0
    while done < trials:
        m = min(MC_BATCH, trials - done)
        h_hat = np.broadcast_to(rho * np.eye(n), (m, n, n)).copy()
        for i in range(q):
            if bits[i] == 0:
                continue
            v = np.broadcast_to(vecs[:, i], (m, n))
            w = _dithered(v, bits[i], rng)
            h_hat += (lam[i] - rho) * w[:, :, None] * w[:, None, :]
        diff = h[None] - h_hat
        samples.append(np.einsum("tij,tij->t", diff, diff))
        done += m
    s = np.concatenate(samples)
    return MCEstimate(float(s.mean()), float(s.std(ddof=1) / math.sqrt(s.size)), int(s.size))


# ---------------------------------------------------------------------------
# continuous allocation by grid search


def grid_search_alloc(p, grid_points=GRID_POINTS, rounds=60):
    """Best point of a log-uniform grid on the budget-equality manifold.

    The first ``q - 1`` coordinates of ``log2 x`` are searched on a grid and
    the last one is fixed by ``sum log2 x = -2 (B - q)``. The grid is
    re-centred on the best point and shrunk after every pass (the cost is
    convex in ``log x``, so the zoom cannot lose the optimum).
    """
    q, budget, lam = int(p.q), int(p.budget), list(p.eigenvalues)
    if q > MAX_GRID_Q:
        raise Unsupported(f"grid search is limited to q <= {MAX_GRID_Q}")
    total = -2.0 * (budget - q)
    lo = total - 2.0 * (q - 1)
    if lo > 2.0 + 1e-12:
        raise InvalidInput("budget is infeasible")

    def evaluate(free):
        last = total - sum(free)
        if last > 2.0 + 1e-12 or last < lo - 1e-12:
            return math.inf, None
        y = list(free) + [last]
        x = [2.0 ** v for v in y]
        return reference_cost(lam, q, x), x

    if q == 1:
        cost, x = evaluate([])
        return np.array(x), cost

    centre = [total / q] * (q - 1)
    half = (2.0 - lo) / 2 + 1.0
    best_cost, best_x = evaluate(centre)
    for _ in range(rounds):
        axes = [np.linspace(c - half, c + half, grid_points) for c in centre]
        for pt in itertools.product(*axes):
            pt = [min(max(v, lo), 2.0) for v in pt]
            cost, x = evaluate(pt)
            if cost < best_cost:
                best_cost, best_x, centre = cost, x, pt
        half *= 4.0 / (grid_points - 1)
        if half < 1e-12:
            break
    return np.array(best_x), best_cost


# ---------------------------------------------------------------------------
# integer allocation by enumeration


def _compositions(total, parts, minimum):
    if parts == 0:
        if total == 0:
            yield ()
        return
    for first in range(minimum, total - minimum * (parts - 1) + 1):
        for rest in _compositions(total - first, parts - 1, minimum):
            yield (first,) + rest


def exhaustive_integer_alloc(p, budget=None):
    """Cheapest integer bits summing to ``budget`` (default ``p.budget``).

    Eigenvectors with a positive linear coefficient get at least one bit;
    those whose coefficient vanishes (eigenvalue tied with ``rho``) get none.
    """
    q = int(p.q)
    budget = int(p.budget if budget is None else budget)
    if q > MAX_ENUM_Q or budget > MAX_ENUM_B:
        raise Unsupported(f"enumeration is limited to q <= {MAX_ENUM_Q} and B <= {MAX_ENUM_B}")
    lam = list(p.eigenvalues)
    _, gamma, _ = _spectrum_terms(lam, q)
    sent = [i for i in range(q) if gamma[i] > 0]
    best_bits, best_cost = None, math.inf
    for combo in _compositions(budget, len(sent), 1):
        bits = [0] * q
        for i, b in zip(sent, combo):
            bits[i] = b
        cost = reference_cost(lam, q, [4.0 ** (1 - b) for b in bits])
        if cost < best_cost:
            best_bits, best_cost = bits, cost
    if best_bits is None:
        raise InvalidInput("no integer allocation meets the budget")
    return np.array(best_bits), best_cost
