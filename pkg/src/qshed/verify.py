"""Property suites behind ``qshed verify``.

Each suite returns a list of :class:`Check` rows comparing a measured value
against its reference; the CLI prints them as a table.
"""
from dataclasses import dataclass
import time

import numpy as np

from . import alloc, oracle
from .dither_quant import dequantize, quantize
from .eigcore import EigenDecomposition


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    measured: float
    expected: float
    tolerance: str
    passed: bool


def random_orthogonal(n, rng, margins=(), tries=100_000):
    """Haar-random orthogonal matrix; column ``i`` keeps ``|v| <= 1 - margins[i]``."""
    margins = np.asarray(margins, dtype=np.float64)
    k = margins.size
    for _ in range(tries):
        q, r = np.linalg.qr(rng.standard_normal((n, n)))
        q = q * np.sign(np.diag(r))
        if k == 0 or np.all(np.max(np.abs(q[:, :k]), axis=0) <= 1.0 - margins):
            return q
    raise RuntimeError("no orthogonal matrix met the margins")


def suite_moments(seed=0, draws=oracle.MOMENT_DRAWS):
    rng = np.random.default_rng(seed)
    out = []
    for b in oracle.MOMENT_BITS:
        delta = 2.0 ** (1 - b)
        v = rng.uniform(-1.0 + delta / 2, 1.0 - delta / 2, draws)
        err = dequantize(quantize(v, b, seed=seed * 1000 + b)) - v
        var = float(np.mean(err ** 2))
        m4 = float(np.mean(err ** 4))
        ref_var, ref_m4 = delta ** 2 / 12, delta ** 4 / 80
        out.append(Check("moments", f"b={b} variance", var, ref_var, "1%",
                         abs(var / ref_var - 1) <= oracle.MOMENT_VAR_RTOL))
        out.append(Check("moments", f"b={b} fourth moment", m4, ref_m4, "2%",
                         abs(m4 / ref_m4 - 1) <= oracle.MOMENT_FOURTH_RTOL))
    return out


def numerical_hessian(fun, x, h=1e-4):
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    q = x.size
    out = np.empty((q, q))
    for i in range(q):
        for j in range(q):
            ei = np.zeros(q)
            ej = np.zeros(q)
            ei[i] = h
            ej[j] = h
            out[i, j] = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)) / (4 * h * h)
    return 0.5 * (out + out.T)


def random_problem(rng, n_range=(3, 12), q_max=6, spread=1.0):
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    q = int(rng.integers(1, min(q_max, n) + 1))
    lam = np.sort(rng.exponential(spread, n))[::-1]
    budget = int(rng.integers(q, 3 * q + 1))
    return alloc.allocation_problem(lam, q, budget)


def suite_convexity(seed=0, instances=oracle.CONVEXITY_INSTANCES):
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(instances):
        p = random_problem(rng)
        x0 = rng.uniform(0.1, 3.0, p.q)
        hess = numerical_hessian(lambda x: float(alloc.expected_error(p, x)), x0)
        worst = min(worst, float(np.linalg.eigvalsh(hess)[0]))
    ns = np.unique(np.geomspace(1, oracle.CONVEXITY_MAX_N, 2000).astype(np.int64))
    gap = min(alloc.a2(int(n)) - alloc.a3(int(n)) for n in ns)
    return [
        Check("convexity", "min eigenvalue of cost Hessian", worst, 0.0, "> 0", worst > 0),
        Check("convexity", "min a2(n) - a3(n), n <= 1e6", gap, 0.0, "> 0", gap > 0),
    ]


def suite_kkt(seed=0, instances=oracle.KKT_INSTANCES):
    rng = np.random.default_rng(seed)
    stat = budget = 0.0
    monotone = True
    for _ in range(instances):
        p = random_problem(rng)
        x, mu = alloc.first_order_closed_form(p.gamma, p.budget)
        stat = max(stat, float(np.max(np.abs(p.gamma * x / (mu / np.log(2)) - 1))))
        budget = max(budget, abs(float(np.sum(np.log2(x))) + 2 * (p.budget - p.q)))
        monotone &= bool(np.all(np.diff(x) >= -1e-12 * np.max(x)))
    grid = bud = 0.0
    for _ in range(20):
        p = random_problem(rng, q_max=3)
        sol = alloc.solve_convex(p)
        _, cost = oracle.grid_search_alloc(p)
        grid = max(grid, (sol.cost - cost) / max(1.0, abs(cost)))
        bud = max(bud, abs(float(np.sum(np.log2(sol.x))) + 2 * (p.budget - p.q)))
    return [
        Check("kkt", "first-order stationarity gamma x / (mu log2 e) - 1", stat, 0.0,
              f"<= {oracle.KKT_TOL:g}", stat <= oracle.KKT_TOL),
        Check("kkt", "first-order budget residual", budget, 0.0, f"<= {oracle.KKT_TOL:g}",
              budget <= oracle.KKT_TOL),
        Check("kkt", "first-order monotone x", float(monotone), 1.0, "== 1", monotone),
        Check("kkt", "exact solver cost minus grid optimum", grid, 0.0,
              f"<= {oracle.GRID_COST_TOL:g}", grid <= oracle.GRID_COST_TOL),
        Check("kkt", "exact solver budget residual", bud, 0.0, f"<= {oracle.BUDGET_TOL:g}",
              bud <= oracle.BUDGET_TOL),
    ]


def error_law_instance(rng):
    """Random spectrum with eigenvectors clear of the quantizer's saturation zone."""
    n = int(rng.integers(6, 13))
    q = int(rng.integers(1, 5))
    bits = rng.integers(1, 4, q)
    # half the first-stage cell width keeps every dithered coordinate inside [-1, 1]
    vecs = random_orthogonal(n, rng, 2.0 ** (1 - bits) / 2)
    lam = np.sort(rng.exponential(1.0, n))[::-1]
    return EigenDecomposition(lam, vecs), q, bits


def suite_error_law(seed=0, instances=oracle.ERROR_LAW_INSTANCES, trials=oracle.ERROR_LAW_TRIALS):
    rng = np.random.default_rng(seed)
    z_worst = rel_worst = 0.0
    for k in range(instances):
        eig, q, bits = error_law_instance(rng)
        p = alloc.allocation_problem(eig.eigenvalues, q, int(bits.sum()))
        pred = float(alloc.expected_error(p, alloc.bits_to_x(bits)))
        est = oracle.mc_frobenius_error(eig, q, bits, trials, seed=seed * 7919 + k)
        z_worst = max(z_worst, abs(est.mean - pred) / est.stderr)
        rel_worst = max(rel_worst, abs(est.mean - pred) / pred)
    return [
        Check("error-law", "max |MC - closed form| / stderr", z_worst, 0.0,
              f"<= {oracle.ERROR_LAW_SIGMAS:g}", z_worst <= oracle.ERROR_LAW_SIGMAS),
        Check("error-law", "max relative deviation", rel_worst, 0.0,
              f"<= {oracle.ERROR_LAW_RTOL:g}", rel_worst <= oracle.ERROR_LAW_RTOL),
    ]


SUITES = {
    "moments": suite_moments,
    "convexity": suite_convexity,
    "kkt": suite_kkt,
    "error-law": suite_error_law,
}


def run_suite(name, seed=0):
    """Run one suite (or ``all``); returns ``(checks, seconds)``."""
    names = list(SUITES) if name == "all" else [name]
    if any(s not in SUITES for s in names):
        raise KeyError(name)
    start = time.perf_counter()
    checks = [c for s in names for c in SUITES[s](seed=seed)]
    return checks, time.perf_counter() - start
