"""Per-device empirical-risk objectives with analytic gradients and Hessians."""
import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

KINDS = ("least-squares", "logistic")


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # (N_d, n)
    labels: np.ndarray  # (N_d,)
    device: int = 0

    def __post_init__(self):
        a = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1:
            raise InvalidInput("features must be a non-empty 2-d array")
        if y.shape != (a.shape[0],):
            raise InvalidInput("labels must have one entry per feature row")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(y))):
            raise InvalidInput("dataset has non-finite entries")
        a.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", a)
        object.__setattr__(self, "labels", y)

    @property
    def size(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class Objective:
    kind: str
    reg: float
    data: Dataset

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown objective kind {self.kind!r}")
        if self.reg < 0 or (self.kind == "logistic" and self.reg <= 0):
            raise InvalidInput("logistic regression needs a positive regularization weight")
        if self.kind == "logistic" and not np.all(np.abs(self.data.labels) == 1):
            raise InvalidInput("logistic labels must be -1 or +1")

    @property
    def dim(self):
        return self.data.dim

    @property
    def size(self):
        return self.data.size


def _margins(obj, theta):
    return obj.data.labels * (obj.data.features @ theta)


def value(obj, theta):
    theta = np.asarray(theta, dtype=np.float64)
    a, y, n = obj.data.features, obj.data.labels, obj.size
    reg = 0.5 * obj.reg * float(theta @ theta)
    if obj.kind == "least-squares":
        r = a @ theta - y
        return float(r @ r) / (2.0 * n) + reg
    z = _margins(obj, theta)
    # log(1 + exp(-z)) without overflow
    loss = np.log1p(np.exp(-np.abs(z))) + np.maximum(-z, 0.0)
    return float(np.sum(loss)) / n + reg


def _sigmoid_neg(z):
    """1 / (1 + exp(z)), stable for large |z|."""
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, e / (1.0 + e), 1.0 / (1.0 + e))


def gradient(obj, theta):
    theta = np.asarray(theta, dtype=np.float64)
    a, y, n = obj.data.features, obj.data.labels, obj.size
    if obj.kind == "least-squares":
        return a.T @ (a @ theta - y) / n + obj.reg * theta
    s = _sigmoid_neg(_margins(obj, theta))
    return -(a.T @ (y * s)) / n + obj.reg * theta


def hessian(obj, theta):
    theta = np.asarray(theta, dtype=np.float64)
    a, n = obj.data.features, obj.size
    if obj.kind == "least-squares":
        w = np.ones(n)
    else:
        s = _sigmoid_neg(_margins(obj, theta))
        w = s * (1.0 - s)
    h = (a.T * w) @ a / n + obj.reg * np.eye(obj.dim)
    return 0.5 * (h + h.T)


def global_value(objs, theta):
    total = sum(o.size for o in objs)
    return sum(o.size * value(o, theta) for o in objs) / total


def global_gradient(objs, theta):
    total = sum(o.size for o in objs)
    return sum(o.size * gradient(o, theta) for o in objs) / total


def global_hessian(objs, theta):
    total = sum(o.size for o in objs)
    return sum(o.size * hessian(o, theta) for o in objs) / total


def pooled(objs):
    """Single objective over the union of all device datasets."""
    a = np.vstack([o.data.features for o in objs])
    y = np.concatenate([o.data.labels for o in objs])
    return Objective(objs[0].kind, objs[0].reg, Dataset(a, y, -1))


def synthetic(kind, devices, samples, dim, seed, cond=100.0, label_skew=0.0,
              feature_shift=0.0, noise=0.1, reg=1e-3, rotate=True):
    """Seeded heterogeneous device datasets.

    Features are Gaussian with covariance spectrum spread geometrically over
    ``[1/cond, 1]`` (optionally in a random orthonormal basis). Device ``d``
    gets its feature mean shifted by ``feature_shift * z_d`` with ``z_d``
    standard normal and, for logistic labels, a bias of
    ``label_skew * (2 d / (M - 1) - 1)`` added to the logit so that devices
    see different class balances. ``samples`` may be an int or one count per
    device.
    """
    rng = np.random.default_rng(seed)
    if np.isscalar(samples):
        samples = [int(samples)] * devices
    if len(samples) != devices:
        raise InvalidInput("need one sample count per device")
    scales = np.sqrt(cond ** (-np.linspace(0.0, 1.0, dim)))
    basis = np.linalg.qr(rng.standard_normal((dim, dim)))[0] if rotate else np.eye(dim)
    theta_true = rng.standard_normal(dim) / np.sqrt(dim) * 4.0
    objs = []
    for d in range(devices):
        shift = feature_shift * rng.standard_normal(dim)
        z = rng.standard_normal((samples[d], dim)) * scales @ basis.T + shift
        logit = z @ theta_true
        if kind == "logistic":
            bias = label_skew * (2.0 * d / max(devices - 1, 1) - 1.0)
            p = 1.0 / (1.0 + np.exp(-(logit + bias)))
            y = np.where(rng.random(samples[d]) < p, 1.0, -1.0)
        else:
            y = logit + noise * rng.standard_normal(samples[d])
        objs.append(Objective(kind, reg, Dataset(z, y, d)))
    return objs


def spiked_least_squares(devices, samples, dim, seed, spikes=(20.0, 10.0, 5.0), noise=0.1, reg=1e-3):
    """Least-squares devices whose data Hessian is exactly ``Q diag(s) Q^T + reg I``.

    ``s`` holds ``spikes`` followed by ones; each device draws its own
    orthonormal basis ``Q``. With a flat tail only the spike directions carry
    quantization bits, which keeps ``rho`` at the tail level.
    """
    if samples < dim:
        raise InvalidInput("need at least as many samples as dimensions")
    rng = np.random.default_rng(seed)
    theta_true = rng.standard_normal(dim)
    s = np.ones(dim)
    s[: len(spikes)] = spikes
    objs = []
    for d in range(devices):
        basis = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
        frame = np.linalg.qr(rng.standard_normal((samples, dim)))[0]
        a = np.sqrt(samples) * (frame * np.sqrt(s)) @ basis.T
        y = a @ theta_true + noise * rng.standard_normal(samples)
        objs.append(Objective("least-squares", reg, Dataset(a, y, d)))
    return objs


def load_csv(path, kind, reg, device=0):
    """Dataset from CSV: last column is the label, a non-numeric first row is a header."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue
                raise InvalidInput(f"{path}:{i + 1}: non-numeric value")
    if not rows:
        raise InvalidInput(f"{path}: no data rows")
    arr = np.array(rows)
    return Objective(kind, reg, Dataset(arr[:, :-1], arr[:, -1], device))


def split(obj, devices, seed=0, label_skew=0.0):
    """Partition one dataset across devices.

    With ``label_skew > 0`` rows are sorted by label before dealing them out
    in contiguous blocks, a fraction ``label_skew`` of them; the rest are
    dealt at random.
    """
    rng = np.random.default_rng(seed)
    n = obj.size
    order = rng.permutation(n)
    k = int(round(label_skew * n))
    if k:
        head = order[:k]
        order = np.concatenate([head[np.argsort(obj.data.labels[head], kind="stable")], order[k:]])
        chunks = [[] for _ in range(devices)]
        for j, block in enumerate(np.array_split(order[:k], devices)):
            chunks[j].extend(block)
        for j, idx in enumerate(order[k:]):
            chunks[j % devices].append(idx)
    else:
        chunks = [list(c) for c in np.array_split(order, devices)]
    out = []
    for d, idx in enumerate(chunks):
        if not idx:
            raise InvalidInput("a device received no samples")
        idx = np.sort(np.array(idx))
        out.append(Objective(obj.kind, obj.reg, Dataset(obj.data.features[idx], obj.data.labels[idx], d)))
    return out
