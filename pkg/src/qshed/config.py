"""Run configuration and its flat ``key = value`` file format.

One assignment per line; ``#`` starts a comment. Values are integers,
floats, ``true``/``false``, or strings (optionally double-quoted).
"""
from dataclasses import asdict, dataclass, fields
import os

MODES = ("qshed", "qshed-first-order", "shed-exact", "naive-uniform")
CHANNELS = ("constant", "rayleigh")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    objective: str = "logistic"  # logistic | least-squares
    dataset: str = "synthetic"  # "synthetic" or a CSV path (last column = label)
    devices: int = 8
    dim: int = 64
    samples: int = 200  # per device, synthetic data only
    cond: float = 100.0
    label_skew: float = 0.0
    feature_shift: float = 0.0
    noise: float = 0.1
    reg: float = 1e-3
    mode: str = "qshed"
    budget_mean: int = 8  # mean bits per coordinate per round
    channel: str = "constant"
    epsilon: float = 1e-6
    renew_period: int = 20  # renewal rounds 1, 1+K, 1+2K, ...; 0 = round 1 only
    max_rounds: int = 200
    seed: int = 0
    line_search: bool = True
    parallelism: int = 1
    output_dir: str = "out"

    def __post_init__(self):
        if self.objective not in ("logistic", "least-squares"):
            raise ConfigError(f"objective: unknown kind {self.objective!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {', '.join(MODES)}, got {self.mode!r}")
        if self.channel not in CHANNELS:
            raise ConfigError(f"channel: expected one of {', '.join(CHANNELS)}, got {self.channel!r}")
        for key in ("devices", "dim", "samples", "budget_mean", "max_rounds", "parallelism"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if self.renew_period < 0:
            raise ConfigError("renew_period: must be >= 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon: must be > 0")
        if self.objective == "logistic" and self.reg <= 0:
            raise ConfigError("reg: logistic regression needs a positive value")

    def renews_at(self, t):
        if t == 1:
            return True
        return self.renew_period > 0 and (t - 1) % self.renew_period == 0

    def to_dict(self):
        return asdict(self)


FIELD_DOCS = {
    "objective": "logistic | least-squares",
    "dataset": "'synthetic' or path to a CSV file (optional header row, last column = label)",
    "devices": "number of devices M",
    "dim": "parameter dimension n (synthetic data)",
    "samples": "samples per device (synthetic data)",
    "cond": "condition number of the synthetic feature covariance",
    "label_skew": "per-device label-balance skew (synthetic) / sorted-label share (CSV split)",
    "feature_shift": "std of per-device feature mean shifts (synthetic)",
    "noise": "label noise std (synthetic least squares)",
    "reg": "L2 regularization weight",
    "mode": " | ".join(MODES),
    "budget_mean": "mean bits per coordinate per round B_mean",
    "channel": " | ".join(CHANNELS),
    "epsilon": "gradient-norm threshold",
    "renew_period": "Hessian renewal period K (renew at 1, 1+K, ...; 0 = only round 1)",
    "max_rounds": "round cap",
    "seed": "master seed for data, dithers and channel",
    "line_search": "true: Armijo backtracking; false: always eta = 1",
    "parallelism": "threads for device rounds (results do not depend on it)",
    "output_dir": "directory for metrics.csv and summary.json (env QSHED_OUTPUT_DIR overrides)",
}


def _coerce(raw, target, key, lineno):
    text = raw.strip()
    if target is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"line {lineno}: {key}: expected true/false, got {text!r}")
    if target is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key}: expected an integer, got {text!r}") from None
    if target is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key}: expected a number, got {text!r}") from None
    if len(text) >= 2 and text[0] == text[-1] == '"':
        return text[1:-1]
    return text


def _strip_comment(line):
    quoted = False
    for i, ch in enumerate(line):
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i]
    return line


def parse_config(text, source="<config>"):
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = _strip_comment(line).strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _coerce(raw, types[key], key, lineno)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path):
    with open(path) as fh:
        cfg = parse_config(fh.read(), source=str(path))
    override = os.environ.get("QSHED_OUTPUT_DIR")
    if override:
        cfg = RunConfig(**{**cfg.to_dict(), "output_dir": override})
    return cfg


def dump_config(cfg):
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, str):
            v = f'"{v}"'
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
