"""Expected Hessian-approximation error and per-eigenvector bit allocation.

Quantizing eigenvector ``i`` with cell width ``delta_i`` and writing
``x_i = delta_i**2`` gives the expected squared Frobenius error

    f(x) = sum_{i>q} lbar_i**2 + sum_i gamma_i x_i
           + a2 sum_i lbar_i**2 x_i**2 + a3 sum_{i != j} lbar_i lbar_j x_i x_j

with ``lbar_i = lambda_i - rho_q``, ``gamma_i = d_q lbar_i + a1 lbar_i**2`` and
``d_q = sum_{i>q} (rho_q - lambda_i) / 6``. A budget of ``B`` bits per
coordinate becomes ``-sum log2 x_i = 2 (B - q)`` with ``0 < x_i <= 4``.

The exact problem is solved in ``y = log x`` where the cost is a sum of
exponentials (convex) and the constraints are one hyperplane plus upper
bounds, handled by an active-set projected Newton method.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .errors import DegenerateCoefficient, Infeasible, InvalidInput, NumericalFailure

LN2 = math.log(2.0)
LN4 = math.log(4.0)
LOG2E = 1.0 / LN2
MAX_NEWTON_ITER = 500


def a1(n):
    # E||v e^T + e v^T||_F^2 = 2 (n + 1) sigma^2 for a unit v and e ~ iid(0, sigma^2)
    return (n + 1.0) / 6.0


def a2(n):
    return n / 80.0 + n * (n - 1.0) / 144.0


def a3(n):
    return n / 144.0


def bits_to_x(bits):
    return 4.0 ** (1.0 - np.asarray(bits, dtype=np.float64))


def x_to_bits(x):
    return 1.0 - 0.5 * np.log2(np.asarray(x, dtype=np.float64))


def _check_spectrum(eigenvalues):
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if lam.ndim != 1 or lam.size == 0:
        raise InvalidInput("eigenvalues must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(lam)):
        raise InvalidInput("eigenvalues must be finite")
    if np.any(np.diff(lam) > 0):
        raise InvalidInput("eigenvalues must be sorted in descending order")
    return lam


@dataclass(frozen=True, eq=False)
class AllocationProblem:
    """Cost coefficients for keeping ``q`` eigenvectors under a per-coordinate budget."""

    eigenvalues: np.ndarray
    q: int
    budget: int
    n: int = field(init=False)
    rho: float = field(init=False)
    lbar: np.ndarray = field(init=False)
    d: float = field(init=False)
    gamma: np.ndarray = field(init=False)
    truncation: float = field(init=False)

    def __post_init__(self):
        lam = _check_spectrum(self.eigenvalues)
        n = lam.size
        if not 1 <= self.q <= n:
            raise InvalidInput(f"q must lie in [1, {n}], got {self.q}")
        rho = float(lam[self.q]) if self.q < n else 0.0
        lbar = lam[: self.q] - rho
        tail = lam[self.q:]
        d = float(np.sum(rho - tail)) / 6.0
        gamma = d * lbar + a1(n) * lbar ** 2
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "lbar", lbar)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "truncation", float(np.sum((tail - rho) ** 2)))

    @property
    def a1(self):
        return a1(self.n)

    @property
    def a2(self):
        return a2(self.n)

    @property
    def a3(self):
        return a3(self.n)

    @property
    def active(self):
        """Coordinates that take part in the allocation (``gamma > 0``)."""
        return self.gamma > 0


@dataclass(frozen=True, eq=False)
class IncrementalAllocationProblem:
    """Refinement round: ``prior_bits[i]`` bits already sent for eigenvector ``i``.

    With ``x_i = 4**(1 - b_new_i)`` the cell width after the round satisfies
    ``delta_i**2 = 4**(-prior_i) * x_i``, so the round's cost is the base cost
    with ``gamma`` and ``lbar`` scaled by ``4**(-prior_i)``.
    """

    base: AllocationProblem
    prior_bits: np.ndarray

    def __post_init__(self):
        prior = np.zeros(self.base.q, dtype=np.int64)
        given = np.asarray(self.prior_bits, dtype=np.int64)
        if given.size > self.base.q or np.any(given < 0):
            raise InvalidInput("prior bits must be non-negative with at most q entries")
        prior[: given.size] = given
        object.__setattr__(self, "prior_bits", prior)

    @property
    def q(self):
        return self.base.q

    @property
    def n(self):
        return self.base.n

    @property
    def budget(self):
        return self.base.budget

    @property
    def scale(self):
        return 4.0 ** (-self.prior_bits.astype(np.float64))

    @property
    def gamma(self):
        return self.scale * self.base.gamma

    @property
    def lbar(self):
        return self.scale * self.base.lbar

    @property
    def active(self):
        return self.base.active


def allocation_problem(eigenvalues, q, budget):
    return AllocationProblem(eigenvalues, int(q), int(budget))


def incremental_problem(eigenvalues, q, budget, prior_bits):
    return IncrementalAllocationProblem(allocation_problem(eigenvalues, q, budget), prior_bits)


@dataclass(frozen=True, eq=False)
class BitAllocation:
    q: int
    x: np.ndarray
    cost: float  # cost of the real-valued solution
    bits: np.ndarray = None  # integer bits once rounded
    bits_cost: float = None
    kkt_residual: float = 0.0
    iterations: int = 0
    box_violations: tuple = ()


def _cost(x, gamma, lbar, n, const):
    x = np.asarray(x, dtype=np.float64)
    lx = lbar * x
    s = np.sum(lx, axis=-1)
    return const + x @ gamma + (a2(n) - a3(n)) * np.sum(lx * lx, axis=-1) + a3(n) * s * s


def expected_error(p, x):
    """Expected ||H - H_hat||_F^2 for interval-squares ``x`` (one per kept eigenvector).

    ``x`` may be a 2-d array of candidate points, one per row.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.q:
        raise InvalidInput(f"expected {p.q} interval values, got {x.shape[-1]}")
    if np.any(x <= 0):
        raise InvalidInput("interval values must be positive")
    return _cost(x, p.gamma, p.lbar, p.n, p.truncation)


def incremental_cost(ip, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != ip.q:
        raise InvalidInput(f"expected {ip.q} interval values, got {x.shape[-1]}")
    if np.any(x <= 0):
        raise InvalidInput("interval values must be positive")
    return _cost(x, ip.gamma, ip.lbar, ip.n, ip.base.truncation)


def cost_hessian(p):
    """Hessian of the cost in ``x``: 2 ((a2 - a3) diag(lbar**2) + a3 lbar lbar^T)."""
    lb = p.lbar
    return 2.0 * ((p.a2 - p.a3) * np.diag(lb * lb) + p.a3 * np.outer(lb, lb))


def _log_domain_newton(gamma, lbar, n, total_log, tol=1e-10, max_iter=MAX_NEWTON_ITER):
    """Minimise the cost over ``y = log x`` with ``sum y = total_log`` and ``y <= log 4``.

    Returns ``(x, iterations, kkt_residual)``.
    """
    m = gamma.size
    if total_log > m * LN4 + 1e-12:
        raise Infeasible("budget leaves no room for the interval upper bound")
    b2 = a2(n) - a3(n)
    b3 = a3(n)

    def parts(y):
        e = np.exp(y)
        le = lbar * e
        s = np.sum(le)
        f = gamma @ e + b2 * np.sum(le * le) + b3 * s * s
        g = gamma * e + 2.0 * b2 * le * le + 2.0 * b3 * s * le
        return f, g, e, le, s

    y = np.full(m, total_log / m)
    active = np.zeros(m, dtype=bool)
    if m == 1:
        return np.exp(y), 0, 0.0

    for it in range(1, max_iter + 1):
        f, g, e, le, s = parts(y)
        free = ~active
        if not np.any(free):
            nu = np.max(g)
        else:
            gf = g[free]
            hdiag = gamma * e + 4.0 * b2 * le * le + 2.0 * b3 * s * le
            dinv = 1.0 / hdiag[free]
            u = math.sqrt(2.0 * b3) * le[free]

            def hinv(r):
                dr = dinv * r
                du = dinv * u
                return dr - du * (u @ dr) / (1.0 + u @ du)

            hg = hinv(gf)
            h1 = hinv(np.ones_like(gf))
            nu = np.sum(hg) / np.sum(h1)
            d = -hg + nu * h1
            decrement = -(gf @ d)
            if decrement > tol * tol * max(abs(f), 1e-300) and np.max(np.abs(d)) > 1e-15:
                step = 1.0
                grow = d > 0
                if np.any(grow):
                    room = (LN4 - y[free][grow]) / d[grow]
                    step = min(1.0, float(np.min(room)))
                alpha = step
                for _ in range(60):
                    trial = y.copy()
                    trial[free] += alpha * d
                    trial = np.minimum(trial, LN4)
                    ft = parts(trial)[0]
                    if ft <= f - 1e-4 * alpha * decrement:
                        break
                    alpha *= 0.5
                else:
                    alpha = 0.0
                if alpha == 0.0 or ft >= f:
                    # no further descent at double precision
                    pass
                else:
                    y[free] += alpha * d
                    if alpha == step and step < 1.0:
                        hit = free.copy()
                        hit[free] = (d > 0) & (LN4 - y[free] <= 1e-12 * max(1.0, abs(LN4)))
                        y[hit] = LN4
                        active |= hit
                    y = np.minimum(y, LN4)
                    continue
        # stationary on the current face: release bounds with the wrong multiplier sign
        release = active & (g > nu + tol * max(1.0, np.max(np.abs(g))))
        if np.any(release):
            active &= ~release
            continue
        return np.exp(y), it, _kkt_residual(g, active, nu)
    raise NumericalFailure(f"bit-allocation solver did not converge in {max_iter} iterations")


def _kkt_residual(g, active, nu):
    scale = max(1e-300, float(np.max(np.abs(g))))
    free = ~active
    r = 0.0
    if np.any(free):
        r = float(np.max(np.abs(g[free] - nu)))
    if np.any(active):
        r = max(r, float(np.max(np.maximum(g[active] - nu, 0.0))))
    return r / scale


def _solve(gamma, lbar, n, q, budget, active):
    x = np.full(q, 4.0)
    m = int(np.count_nonzero(active))
    if m == 0:
        return x, 0, 0.0
    total_log = -2.0 * (budget - m) * LN2
    xa, it, res = _log_domain_newton(gamma[active], lbar[active], n, total_log)
    x[active] = xa
    return x, it, res


def solve_convex(p):
    """Exact minimiser of the expected error for fixed ``q`` (real-valued ``x``)."""
    m = int(np.count_nonzero(p.active))
    if p.budget < m:
        raise Infeasible(f"budget {p.budget} cannot give one bit to each of {m} eigenvectors")
    x, it, res = _solve(p.gamma, p.lbar, p.n, p.q, p.budget, p.active)
    return BitAllocation(p.q, x, float(expected_error(p, x)), kkt_residual=res, iterations=it)


def solve_incremental(ip):
    if ip.budget < 0:
        raise Infeasible("negative round budget")
    x, it, res = _solve(ip.gamma, ip.lbar, ip.n, ip.q, ip.budget, ip.active)
    return BitAllocation(ip.q, x, float(incremental_cost(ip, x)), kkt_residual=res, iterations=it)


def first_order_closed_form(gamma, budget):
    """Unconstrained-box minimiser of ``gamma . x`` under ``-sum log2 x = 2 (B - q)``.

    Returns ``(x, mu)`` with ``gamma_i x_i = mu log2(e)`` for every ``i``.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma <= 0):
        raise DegenerateCoefficient("first-order allocation needs strictly positive gamma")
    q = gamma.size
    log_geo = np.mean(np.log2(gamma))
    log_mu_scaled = log_geo - 2.0 * (budget / q - 1.0)  # log2(mu * log2 e)
    x = 2.0 ** (log_mu_scaled - np.log2(gamma))
    return x, 2.0 ** log_mu_scaled / LOG2E


def _first_order(gamma, budget, box):
    q = gamma.size
    x, _ = first_order_closed_form(gamma, budget)
    violations = tuple(int(i) for i in np.flatnonzero(x > 4.0))
    if not box or not violations:
        return x, violations
    free = np.ones(q, dtype=bool)
    while True:
        xf, _ = first_order_closed_form(gamma[free], budget)
        over = xf > 4.0
        if not np.any(over):
            x = np.full(q, 4.0)
            x[free] = xf
            return x, violations
        idx = np.flatnonzero(free)[over]
        free[idx] = False


def solve_first_order(p, box=True):
    """Closed-form allocation for the cost with second-order terms dropped.

    With ``box`` set, coordinates whose closed-form value exceeds 4 (negative
    bits) are pinned at 4 and the rest re-solved on the same budget until
    feasible. ``box_violations`` lists the coordinates that violated the
    bound in the first pass.
    """
    if np.any(p.gamma <= 0):
        raise DegenerateCoefficient("gamma vanishes for an eigenvalue tied with rho_q")
    x, violations = _first_order(p.gamma, p.budget, box)
    return BitAllocation(p.q, x, float(expected_error(p, x)), box_violations=violations)


def solve_first_order_incremental(ip, box=True):
    active = ip.active
    x = np.full(ip.q, 4.0)
    violations = ()
    if np.any(active):
        xa, violations = _first_order(ip.gamma[active], ip.budget, box)
        x[active] = xa
    return BitAllocation(ip.q, x, float(incremental_cost(ip, x)), box_violations=violations)


def _greedy_repair(bits, target, cost_fn, min_bits, locked):
    """Move single bits until ``sum(bits) == target``, each move the cheapest in cost."""
    bits = bits.copy()
    q = bits.size
    eye = np.eye(q, dtype=np.int64)
    while bits.sum() != target:
        adding = bits.sum() < target
        step = 1 if adding else -1
        cand = bits[None, :] + step * eye
        ok = ~locked & ((cand.diagonal() >= min_bits) if not adding else True)
        if not np.any(ok):
            raise Infeasible("cannot meet the bit budget under the per-vector minimum")
        costs = np.full(q, np.inf)
        costs[ok] = cost_fn(cand[ok])
        best = np.min(costs)
        ties = np.flatnonzero(costs <= best + 1e-12 * max(1.0, abs(best)))
        pick = ties[0] if adding else ties[-1]
        bits[pick] += step
    return bits


def _round(x, budget, cost_fn, min_bits, active):
    if budget < 0:
        raise InvalidInput("bit budget must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    real = x_to_bits(x)
    bits = np.floor(real + 0.5).astype(np.int64)
    bits = np.where(active, np.maximum(bits, min_bits), 0)
    return _greedy_repair(bits, budget, cost_fn, min_bits, ~active)


def round_to_bits(p, x, min_bits=1):
    """Integer bits summing exactly to the budget.

    Real bits ``1 - log2(x)/2`` are rounded to nearest, then single bits are
    added or removed greedily where the expected error changes least.
    """
    return _round(x, p.budget, lambda b: expected_error(p, bits_to_x(b)), min_bits, p.active)


def round_incremental(ip, x):
    return _round(x, ip.budget, lambda b: incremental_cost(ip, bits_to_x(b)), 0, ip.active)


def allocate(p, first_order=False):
    """Solve for fixed ``q`` and round to integer bits."""
    sol = solve_first_order(p) if first_order else solve_convex(p)
    bits = round_to_bits(p, sol.x)
    return BitAllocation(
        sol.q, sol.x, sol.cost, bits, float(expected_error(p, bits_to_x(bits))),
        sol.kkt_residual, sol.iterations, sol.box_violations,
    )


def optimize_q(eigenvalues, budget, first_order=False):
    """Best ``q`` and allocation over every feasible ``q <= min(n, budget)``.

    The real-valued optimum decides between values of ``q``; ties go to the
    smaller ``q``.
    """
    lam = _check_spectrum(eigenvalues)
    if budget < 1:
        raise Infeasible("budget must be at least one bit per coordinate")
    best = None
    for q in range(1, min(lam.size, int(budget)) + 1):
        p = allocation_problem(lam, q, budget)
        if not np.any(p.active):
            continue
        if first_order and not np.all(p.active):
            continue
        sol = allocate(p, first_order)
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None:
        raise Infeasible("no feasible number of eigenvectors")
    return best


def heuristic_q(q_prev, budget, eigenvalues, prior_bits, first_order=False):
    """One-shot choice of how many eigenvectors to touch in a refinement round.

    Solves the incremental problem once at ``min(q_prev + budget, n)`` and
    keeps eigenvectors up to the last one with a non-zero cumulative depth.
    Returns ``(q_t, new_bits, cumulative_bits)`` truncated to ``q_t``.
    """
    lam = _check_spectrum(eigenvalues)
    if budget < 1:
        raise InvalidInput("round budget must be at least 1")
    n = lam.size
    qbar = min(q_prev + int(budget), n)
    prior = np.zeros(qbar, dtype=np.int64)
    given = np.asarray(prior_bits, dtype=np.int64)[:qbar]
    prior[: given.size] = given
    ip = incremental_problem(lam, qbar, budget, prior)
    sol = solve_first_order_incremental(ip) if first_order else solve_incremental(ip)
    new = round_incremental(ip, sol.x)
    total = prior + new
    nz = np.flatnonzero(total > 0)
    q_t = int(nz[-1]) + 1 if nz.size else 0
    return q_t, new[:q_t], total[:q_t]
