"""Command-line interface: ``qshed run | verify | alloc``."""
import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, alloc, oracle, verify
from .config import FIELD_DOCS, ConfigError, RunConfig, dump_config, load_config
from .errors import Infeasible, QShedError
from .simnet import CSV_COLUMNS, Simulation, format_row

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ROUND_CAP = 2


def _config_help():
    defaults = RunConfig().to_dict()
    width = max(len(k) for k in FIELD_DOCS)
    lines = ["configuration keys (key = value, one per line, '#' comments):"]
    for key, doc in FIELD_DOCS.items():
        lines.append(f"  {key:<{width}}  {doc} [default: {defaults[key]}]")
    lines.append("")
    lines.append("exit codes: 0 converged, 2 round cap reached, 1 error")
    return "\n".join(lines)


def config_hash(cfg):
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def cmd_run(args):
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        sim = Simulation(cfg)
        os.makedirs(cfg.output_dir, exist_ok=True)
        digest = config_hash(cfg)
        metrics_path = os.path.join(cfg.output_dir, "metrics.csv")
        with open(metrics_path, "w", newline="") as fh:
            fh.write(f"# qshed {__version__} config-sha256 {digest}\n")
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for m in sim:
                fh.write(format_row(m) + "\n")
                if not args.quiet:
                    print(f"round {m.round:4d}  |g| {m.grad_norm:.3e}  f {m.f_value:.6e}  eta {m.eta:g}",
                          file=sys.stderr)
    except (QShedError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    last = sim.history[-1]
    summary = {
        "version": __version__,
        "config_sha256": digest,
        "config": cfg.to_dict(),
        "termination": sim.status,
        "rounds": len(sim.history),
        "final_grad_norm": last.grad_norm,
        "final_f_value": last.f_value,
        "total_payload_bits": last.cumulative_bits,
        "total_bytes": last.cumulative_bytes,
    }
    with open(os.path.join(cfg.output_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{sim.status} after {len(sim.history)} rounds; wrote {metrics_path}")
    return EXIT_OK if sim.status == "converged" else EXIT_ROUND_CAP


def cmd_verify(args):
    checks, seconds = verify.run_suite(args.suite, seed=args.seed)
    if args.force_fail:
        checks.append(verify.Check("forced", "--force-fail", 1.0, 0.0, "== 0", False))
    width = max(len(c.name) for c in checks)
    print(f"{'suite':<10} {'check':<{width}} {'measured':>14} {'expected':>14}  {'tol':<10} result")
    for c in checks:
        print(f"{c.suite:<10} {c.name:<{width}} {c.measured:>14.6g} {c.expected:>14.6g}  "
              f"{c.tolerance:<10} {'PASS' if c.passed else 'FAIL'}")
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed in {seconds:.1f}s")
    return EXIT_OK if failed == 0 else EXIT_ERROR


def _parse_lambdas(text, n):
    try:
        lam = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse eigenvalues {text!r}") from None
    if not lam:
        raise argparse.ArgumentTypeError("need at least one eigenvalue")
    n = n or len(lam)
    if n < len(lam):
        raise argparse.ArgumentTypeError(f"--n {n} is smaller than the {len(lam)} eigenvalues given")
    # pad the tail with the last value
    return np.array(lam + [lam[-1]] * (n - len(lam)))


def _describe(label, fn):
    try:
        sol = fn()
    except (Infeasible, QShedError) as exc:
        return label, None, str(exc)
    return label, sol, None


def cmd_alloc(parser, args):
    if args.budget < 1:
        parser.error("--budget must be at least 1")
    try:
        lam = _parse_lambdas(args.lambdas, args.n)
        lam = alloc._check_spectrum(lam)
    except (argparse.ArgumentTypeError, QShedError) as exc:
        parser.error(str(exc))
    modes = {"exact": [False], "first-order": [True], "both": [False, True]}[args.mode]
    results = [
        _describe("first-order" if fo else "exact", lambda fo=fo: alloc.optimize_q(lam, args.budget, fo))
        for fo in modes
    ]
    print(f"n = {lam.size}, B = {args.budget}")
    for label, sol, err in results:
        if err:
            print(f"{label:>12}: infeasible ({err})")
    ok = [(label, sol) for label, sol, err in results if sol is not None]
    if not ok:
        return EXIT_ERROR
    print(f"{'':>6}" + "".join(f"{label:>16}" for label, _ in ok))
    print(f"{'q*':>6}" + "".join(f"{sol.q:>16d}" for _, sol in ok))
    print(f"{'error':>6}" + "".join(f"{sol.bits_cost:>16.6g}" for _, sol in ok))
    for i in range(max(sol.q for _, sol in ok)):
        cells = []
        for _, sol in ok:
            cells.append(f"{int(sol.bits[i]):>16d}" if i < sol.q else f"{'':>16}")
        print(f"{'b_' + str(i + 1):>6}" + "".join(cells))
    return EXIT_OK


def cmd_regen_oracles(args):
    """Recompute the oracle reference values used by derived test examples."""
    rng = np.random.default_rng(args.seed)
    out = {"error_law": [], "grid": [], "integer": []}
    for k in range(5):
        eig, q, bits = verify.error_law_instance(rng)
        est = oracle.mc_frobenius_error(eig, q, bits, oracle.MC_MIN_TRIALS, seed=k)
        out["error_law"].append({"eigenvalues": eig.eigenvalues.tolist(), "q": q, "bits": bits.tolist(),
                                 "mean": est.mean, "stderr": est.stderr})
    for _ in range(5):
        p = verify.random_problem(rng, q_max=3)
        x, cost = oracle.grid_search_alloc(p)
        out["grid"].append({"eigenvalues": p.eigenvalues.tolist(), "q": p.q, "budget": p.budget,
                            "x": x.tolist(), "cost": cost})
    for _ in range(5):
        p = verify.random_problem(rng, q_max=oracle.MAX_ENUM_Q)
        if p.budget > oracle.MAX_ENUM_B:
            continue
        bits, cost = oracle.exhaustive_integer_alloc(p)
        out["integer"].append({"eigenvalues": p.eigenvalues.tolist(), "q": p.q, "budget": p.budget,
                               "bits": bits.tolist(), "cost": cost})
    json.dump(out, sys.stdout, indent=2)
    print()
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qshed", description="Quantized second-order federated learning simulator.",
        epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"qshed {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{run,verify,alloc}", required=True)

    p_run = sub.add_parser("run", help="run a simulation from a config file",
                           epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p_run.add_argument("config", help="path to a key = value config file")
    p_run.add_argument("-q", "--quiet", action="store_true", help="no per-round progress on stderr")

    p_ver = sub.add_parser("verify", help="run a property suite and print a pass/fail table")
    p_ver.add_argument("suite", choices=[*verify.SUITES, "all"])
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--force-fail", action="store_true", help="append a failing check (exit 1)")

    p_all = sub.add_parser("alloc", help="print optimal bit allocations for a spectrum")
    p_all.add_argument("--lambdas", required=True,
                       help="descending eigenvalues, comma or space separated")
    p_all.add_argument("--n", type=int, default=None,
                       help="dimension; the spectrum is padded with its last value")
    p_all.add_argument("--budget", type=int, required=True, help="bits per coordinate B")
    p_all.add_argument("--mode", choices=["exact", "first-order", "both"], default="both")

    p_reg = sub.add_parser("regen-oracles")
    p_reg.add_argument("--seed", type=int, default=0)
    return parser, p_all


def main(argv=None):
    parser, alloc_parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "verify":
        return cmd_verify(args)
    if args.command == "alloc":
        return cmd_alloc(alloc_parser, args)
    return cmd_regen_oracles(args)


if __name__ == "__main__":
    sys.exit(main())
