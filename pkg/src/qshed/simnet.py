"""Deterministic multi-device simulator of the quantized SHED loop.

Each round every device (optionally renews its Hessian eigendecomposition,)
computes its gradient, chooses how many eigenvectors to touch and how many
bits each gets, and emits a :class:`~qshed.protocol.DeviceUpdate`. Updates
travel through the byte-level protocol; the aggregator mirrors every
device's quantizer state, assembles the weighted Hessian approximation and
takes a backtracking Newton-type step.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import math

import numpy as np
from scipy import linalg

from . import alloc, objectives, protocol
from .dither_quant import (
    MAX_DEPTH,
    apply_refinement,
    dequantize,
    derive_seed,
    first_message,
    quantize,
    refine,
    uniform_stream,
)
from .eigcore import eigendecompose, lowrank_plus_identity
from .errors import Infeasible, NumericalFailure, ProtocolError, Unsupported

EXACT_BITS = 64  # full-precision coordinate


# ---------------------------------------------------------------------------
# channel


@dataclass(frozen=True)
class ChannelModel:
    kind: str = "constant"
    mean: int = 8
    seed: int = 0
    scale: tuple = ()  # optional per-device multiplier of ``mean``


def channel_budget(ch, device, t):
    """Per-coordinate bit budget of ``device`` in round ``t`` (always >= 1).

    The Rayleigh channel scales the mean by an exponential (unit-mean) power
    gain drawn from a stream keyed by ``(seed, device, t)``.
    """
    mean = ch.mean * (ch.scale[device] if ch.scale else 1.0)
    if ch.kind == "constant":
        return max(1, int(math.floor(mean + 0.5)))
    if ch.kind != "rayleigh":
        raise ValueError(f"unknown channel kind {ch.kind!r}")
    u = uniform_stream(derive_seed(ch.seed, 0xC4A7, device, t), 1)[0]
    gain = -math.log1p(-u)
    return max(1, int(math.floor(mean * gain + 0.5)))


# ---------------------------------------------------------------------------
# devices


@dataclass(frozen=True, eq=False)
class DeviceState:
    device: int
    objective: objectives.Objective
    mode: str = "qshed"
    seed: int = 0
    eig: object = None
    renewed_at: int = 0
    q_prev: int = 0
    cum_bits: tuple = ()
    qvs: tuple = ()  # QuantizedVector or None per eigenvector
    master_seed: int = 0

    @property
    def weight(self):
        return self.objective.size

    def v_hat(self, i):
        if self.mode == "shed-exact":
            return self.eig.eigenvectors[:, i] if i < self.q_prev else None
        qv = self.qvs[i] if i < len(self.qvs) else None
        return None if qv is None else dequantize(qv)


def _naive_split(budget, q_t, prior, n):
    """Equal split of ``budget`` over eigenvectors ``1..q_t`` (remainder to the lowest)."""
    new = np.zeros(q_t, dtype=np.int64)
    if q_t == 0:
        return new
    base, rem = divmod(int(budget), q_t)
    new[:] = base
    new[:rem] += 1
    return new


def _select_bits(state, budget, eigenvalues):
    n = eigenvalues.size
    prior = np.asarray(state.cum_bits, dtype=np.int64)
    first_order = state.mode == "qshed-first-order"
    q_t, new, _ = alloc.heuristic_q(state.q_prev, budget, eigenvalues, prior, first_order)
    if state.mode == "naive-uniform":
        new = _naive_split(budget, q_t, prior, n)
        total = prior[:q_t] + new
        nz = np.flatnonzero(total > 0)
        q_t = int(nz[-1]) + 1 if nz.size else 0
        new = new[:q_t]
    return q_t, new


def device_round(state, theta, budget, t, renew):
    """One device step; returns the new state and the update to transmit."""
    obj = state.objective
    n = obj.dim
    if budget < 1:
        raise ValueError("round budget must be at least 1")
    master = None
    if renew or state.eig is None:
        eig = eigendecompose(objectives.hessian(obj, theta))
        master = derive_seed(state.seed, state.device, t)
        state = replace(
            state, eig=eig, renewed_at=t, q_prev=0, cum_bits=(0,) * n, qvs=(None,) * n,
            master_seed=master,
        )
        renew = True
    grad = objectives.gradient(obj, theta)
    lam = state.eig.eigenvalues
    vecs = state.eig.eigenvectors
    q_prev = state.q_prev
    messages, exact = [], []
    infeasible = False

    if state.mode == "shed-exact":
        q_t = min(n, q_prev + budget // EXACT_BITS)
        exact = [(i, vecs[:, i]) for i in range(q_prev, q_t)]
        cum, qvs = state.cum_bits, state.qvs
    else:
        try:
            q_t, new = _select_bits(state, budget, lam)
        except Infeasible:
            q_t, new, infeasible = q_prev, np.zeros(q_prev, dtype=np.int64), True
        cum = list(state.cum_bits)
        qvs = list(state.qvs)
        for i in range(q_t):
            add = int(min(new[i], MAX_DEPTH - cum[i]))
            if add <= 0:
                continue
            v = vecs[:, i]
            if qvs[i] is None:
                qvs[i] = quantize(v, add, seed=derive_seed(state.master_seed, i))
                messages.append(first_message(qvs[i], i))
            else:
                qvs[i], msg = refine(qvs[i], v, add, index=i)
                messages.append(msg)
            cum[i] += add
        cum, qvs = tuple(cum), tuple(qvs)

    rho = float(lam[q_t]) if q_t < n else 0.0
    update = protocol.DeviceUpdate(
        device=state.device, round=t, renewal=renew, q_prev=q_prev, q_t=q_t,
        eigenvalues=lam[q_prev:q_t], rho=rho, gradient=grad, messages=tuple(messages),
        master_seed=master if renew else None, exact_vectors=tuple(exact), infeasible=infeasible,
    )
    return replace(state, q_prev=q_t, cum_bits=cum, qvs=qvs), update


# ---------------------------------------------------------------------------
# aggregator


@dataclass(eq=False)
class Mirror:
    """Aggregator-side copy of one device's transmitted state."""

    weight: int
    eigenvalues: list = field(default_factory=list)
    rho: float = 0.0
    qvs: dict = field(default_factory=dict)
    exact: dict = field(default_factory=dict)
    master_seed: int = None

    @property
    def q(self):
        return len(self.eigenvalues)

    def v_hat(self, i):
        if i in self.exact:
            return self.exact[i]
        qv = self.qvs.get(i)
        return None if qv is None else dequantize(qv)

    def matrix(self, n):
        vectors = [self.v_hat(i) for i in range(self.q)]
        return lowrank_plus_identity(self.eigenvalues, self.rho, vectors, n)


@dataclass(eq=False)
class AggregatorState:
    """Mutable aggregator state; :func:`aggregate` updates the mirrors in place."""

    theta: np.ndarray
    weights: dict  # device id -> N_d
    mirrors: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mirrors = {d: Mirror(w) for d, w in sorted(self.weights.items())}

    @property
    def total_weight(self):
        return sum(self.weights.values())

    def receive(self, update):
        m = self.mirrors.get(update.device)
        if m is None:
            raise ProtocolError(f"update from unknown device {update.device}")
        if update.renewal:
            m = self.mirrors[update.device] = Mirror(m.weight, master_seed=update.master_seed)
        if update.q_prev != m.q:
            raise ProtocolError(
                f"device {update.device}: update starts at q={update.q_prev}, mirror holds {m.q}"
            )
        if m.eigenvalues and len(update.eigenvalues) and update.eigenvalues[0] > m.eigenvalues[-1]:
            raise ProtocolError(f"device {update.device}: eigenvalues increase across rounds")
        m.eigenvalues.extend(float(v) for v in update.eigenvalues)
        m.rho = float(update.rho)
        for msg in update.messages:
            seed = derive_seed(m.master_seed, msg.index) if msg.stage == 0 else None
            m.qvs[msg.index] = apply_refinement(m.qvs.get(msg.index), msg, seed)
        for i, v in update.exact_vectors:
            m.exact[i] = v


def aggregate(agg, updates):
    """Fold one round of updates into the mirrors; return ``(H_hat, g)``."""
    by_device = {u.device: u for u in updates}
    missing = set(agg.weights) - set(by_device)
    if missing or len(by_device) != len(updates):
        raise ProtocolError(f"need exactly one update per device (missing {sorted(missing)})")
    n = agg.theta.shape[0]
    total = agg.total_weight
    h = np.zeros((n, n))
    g = np.zeros(n)
    for d in sorted(by_device):
        u = by_device[d]
        agg.receive(u)
        w = agg.weights[d] / total
        h += w * agg.mirrors[d].matrix(n)
        g += w * u.gradient
    return 0.5 * (h + h.T), g


# ---------------------------------------------------------------------------
# update step


def newton_step(h_hat, g, theta, f, c=1e-4, beta=0.5, max_halvings=50, line_search=True):
    """Newton-type step ``theta - eta H_hat^{-1} g`` with Armijo backtracking.

    Returns ``(theta_next, eta, evaluations)``. A zero gradient leaves
    ``theta`` unchanged with ``eta = 0``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if not np.any(g):
        return theta.copy(), 0.0, 0
    try:
        factor = linalg.cho_factor(h_hat)
    except linalg.LinAlgError:
        try:
            factor = linalg.cho_factor(h_hat + 1e-10 * np.eye(h_hat.shape[0]))
        except linalg.LinAlgError:
            raise NumericalFailure("Hessian approximation is not positive definite") from None
    p = -linalg.cho_solve(factor, g)
    if not line_search:
        return theta + p, 1.0, 0
    f0 = f(theta)
    slope = float(g @ p)
    eta = 1.0
    evals = 0
    for _ in range(max_halvings + 1):
        trial = theta + eta * p
        evals += 1
        if f(trial) <= f0 + c * eta * slope:
            return trial, eta, evals
        eta *= beta
    return theta.copy(), 0.0, evals


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class ConvergenceBound:
    lambda_bar_n: float
    rho_bar: float
    e_t: float
    e_t_frobenius: float
    kappa: float


def _delta_v_norms(v, w):
    """Spectral and Frobenius norms of v v^T - w w^T via its 2x2 restriction."""
    if w is None:
        w = np.zeros_like(v)
    vv, ww, vw = v @ v, w @ w, v @ w
    tr = vv - ww
    det = vw * vw - vv * ww
    disc = math.sqrt(max(tr * tr - 4.0 * det, 0.0))
    l1, l2 = 0.5 * (tr + disc), 0.5 * (tr - disc)
    return max(abs(l1), abs(l2)), math.sqrt(l1 * l1 + l2 * l2)


def convergence_bound(agg, devices):
    """Per-round linear-rate certificate for least squares.

    ``kappa = 1 - (lambda_bar_n - e_t) / rho_bar`` with weighted averages over
    devices of the smallest local eigenvalue and of rho, and ``e_t`` the
    weighted sum of ``(lambda_i - rho) ||v_i v_i^T - v_hat_i v_hat_i^T||``.
    """
    total = agg.total_weight
    lam_n = rho_bar = e_spec = e_frob = 0.0
    for st in devices:
        if st.objective.kind != "least-squares":
            raise Unsupported("the contraction bound is only defined for least squares")
        m = agg.mirrors[st.device]
        w = agg.weights[st.device] / total
        lam_n += w * float(st.eig.eigenvalues[-1])
        rho_bar += w * m.rho
        for i in range(m.q):
            spec, frob = _delta_v_norms(st.eig.eigenvectors[:, i], m.v_hat(i))
            e_spec += w * (m.eigenvalues[i] - m.rho) * spec
            e_frob += w * (m.eigenvalues[i] - m.rho) * frob
    if rho_bar > 0:
        kappa = 1.0 - (lam_n - e_spec) / rho_bar
    else:
        kappa = 0.0 if e_spec == 0 else math.inf
    return ConvergenceBound(lam_n, rho_bar, e_spec, e_frob, kappa)


# ---------------------------------------------------------------------------
# run loop


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    grad_norm: float
    f_value: float
    eta: float
    round_bits: int
    cumulative_bits: int
    round_bytes: int
    cumulative_bytes: int
    q: tuple
    budgets: tuple
    renewal: bool
    line_search_evals: int
    infeasible: int
    kappa: float = None
    e_t: float = None
    e_t_frobenius: float = None
    lambda_bar_n: float = None
    rho_bar: float = None


CSV_COLUMNS = (
    "round", "grad_norm", "f_value", "eta", "round_bits", "cumulative_bits", "round_bytes",
    "cumulative_bytes", "q", "budgets", "renewal", "line_search_evals", "infeasible",
    "kappa", "e_t", "e_t_frobenius", "lambda_bar_n", "rho_bar",
)


def format_row(m):
    out = []
    for col in CSV_COLUMNS:
        v = getattr(m, col)
        if v is None:
            out.append("")
        elif isinstance(v, bool):
            out.append("1" if v else "0")
        elif isinstance(v, tuple):
            out.append(";".join(str(int(x)) for x in v))
        elif isinstance(v, float):
            out.append(repr(v))
        else:
            out.append(str(v))
    return ",".join(out)


def build_objectives(cfg):
    if cfg.dataset == "synthetic":
        return objectives.synthetic(
            cfg.objective, cfg.devices, cfg.samples, cfg.dim, cfg.seed, cond=cfg.cond,
            label_skew=cfg.label_skew, feature_shift=cfg.feature_shift, noise=cfg.noise,
            reg=cfg.reg,
        )
    pooled = objectives.load_csv(cfg.dataset, cfg.objective, cfg.reg)
    return objectives.split(pooled, cfg.devices, seed=cfg.seed, label_skew=cfg.label_skew)


class Simulation:
    """Round-by-round execution of one configuration.

    Iterating yields :class:`RoundMetrics`; afterwards ``status`` is
    ``"converged"`` or ``"round-cap"``.
    """

    def __init__(self, cfg, objs=None, theta0=None, channel=None):
        self.cfg = cfg
        self.objs = list(objs) if objs is not None else build_objectives(cfg)
        n = self.objs[0].dim
        self.theta = np.zeros(n) if theta0 is None else np.array(theta0, dtype=np.float64)
        self.channel = channel or ChannelModel(cfg.channel, cfg.budget_mean, cfg.seed)
        self.devices = [
            DeviceState(d, o, cfg.mode, cfg.seed) for d, o in enumerate(self.objs)
        ]
        self.agg = AggregatorState(self.theta.copy(), {d: o.size for d, o in enumerate(self.objs)})
        self.status = None
        self.history = []
        self.last_updates = []

    def f(self, theta):
        return objectives.global_value(self.objs, theta)

    def _device_rounds(self, t, budgets, renew):
        def work(d):
            return device_round(self.devices[d], self.theta, budgets[d], t, renew)

        if self.cfg.parallelism > 1:
            with ThreadPoolExecutor(self.cfg.parallelism) as pool:
                return list(pool.map(work, range(len(self.devices))))
        return [work(d) for d in range(len(self.devices))]

    def __iter__(self):
        cfg = self.cfg
        cum_bits = cum_bytes = 0
        for t in range(1, cfg.max_rounds + 1):
            renew = cfg.renews_at(t)
            budgets = [channel_budget(self.channel, d, t) for d in range(len(self.devices))]
            results = self._device_rounds(t, budgets, renew)
            self.devices = [s for s, _ in results]
            wire = [protocol.encode(u) for _, u in results]
            updates = [protocol.decode(b) for b in wire]
            self.last_updates = updates
            h_hat, g = aggregate(self.agg, updates)
            round_bits = sum(protocol.payload_bits(u) for u in updates)
            round_bytes = sum(len(b) for b in wire)
            cum_bits += round_bits
            cum_bytes += round_bytes
            gnorm = float(np.linalg.norm(g))
            f_val = self.f(self.theta)
            bound = None
            if cfg.objective == "least-squares":
                bound = convergence_bound(self.agg, self.devices)
            done = gnorm < cfg.epsilon
            if done:
                eta, evals = 0.0, 0
            else:
                self.theta, eta, evals = newton_step(
                    h_hat, g, self.theta, self.f, line_search=cfg.line_search
                )
                self.agg.theta = self.theta.copy()
            m = RoundMetrics(
                round=t, grad_norm=gnorm, f_value=f_val, eta=float(eta), round_bits=round_bits,
                cumulative_bits=cum_bits, round_bytes=round_bytes, cumulative_bytes=cum_bytes,
                q=tuple(u.q_t for u in updates), budgets=tuple(budgets), renewal=renew,
                line_search_evals=evals, infeasible=sum(u.infeasible for u in updates),
                kappa=None if bound is None else float(bound.kappa),
                e_t=None if bound is None else float(bound.e_t),
                e_t_frobenius=None if bound is None else float(bound.e_t_frobenius),
                lambda_bar_n=None if bound is None else float(bound.lambda_bar_n),
                rho_bar=None if bound is None else float(bound.rho_bar),
            )
            self.history.append(m)
            yield m
            if done:
                self.status = "converged"
                return
        self.status = "round-cap"


def run(cfg, **kwargs):
    """Run to completion; returns the :class:`Simulation` with its history."""
    sim = Simulation(cfg, **kwargs)
    for _ in sim:
        pass
    return sim
