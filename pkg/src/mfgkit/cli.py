"""Batch command-line front end.

Exit codes: 0 success, 2 configuration or usage error (including an unstable
model without an explicit horizon), 3 equilibrium search did not converge
(outputs are still written), 4 model integrity violation.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import DEFAULT_ADDITIVE_CONFIG, load_config, model_from_config
from .errors import ConfigurationError, DomainError, ModelIntegrityError, StabilityError
from .mfe import MfeOptions, MfeSolution, solve_mfe
from .model import default_probes, estimate_growth_constants
from .sim import (
    SimConfig,
    empirical_convergence_study,
    manifest_json,
    nash_gap_sweep,
    resolve_workers,
    simulate,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_INTEGRITY = 4

BUILTIN_CONFIGS = {
    "toy": {"model": "toy", "beta": 0.9},
    "toy_decoupled": {"model": "toy_decoupled", "beta": 0.9, "occupancy": 0.5},
    "additive": DEFAULT_ADDITIVE_CONFIG,
}

log = logging.getLogger("mfgkit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def _damping(text: str):
    if text == "harmonic":
        return "harmonic"
    if text.startswith("const:"):
        try:
            d = float(text.split(":", 1)[1])
        except ValueError:
            d = -1.0
        if 0.0 < d <= 1.0:
            return d
    raise argparse.ArgumentTypeError("damping must be 'harmonic' or 'const:D' with 0 < D <= 1")


def _int_list(text: str) -> List[int]:
    try:
        out = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _seed(text: str) -> int:
    try:
        s = int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from exc
    if not 0 <= s < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return s


def build_parser() -> argparse.ArgumentParser:
    defaults = MfeOptions()
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True,
                        help="JSON model config, or one of: " + ", ".join(BUILTIN_CONFIGS))
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--horizon", type=int, default=None, help="override tail-driven truncation")
    common.add_argument("--tol-tail", type=float, default=defaults.tol_tail)
    common.add_argument("--tol-flow", type=float, default=defaults.tol_flow)
    common.add_argument("--tol-exploit", type=float, default=defaults.tol_exploit)
    common.add_argument("--damping", type=_damping, default=defaults.damping,
                        help="harmonic | const:D")
    common.add_argument("--max-iters", type=int, default=defaults.max_iters)
    common.add_argument("--seed", type=_seed, default=0)
    common.add_argument("--workers", type=int, default=None,
                        help="cap on concurrent replications (default $MFGKIT_WORKERS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mfgkit", description="Discounted mean-field game solver and simulator.")
    parser.add_argument("--version", action="version", version=f"mfgkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("solve", parents=[common], help="compute a mean-field equilibrium")
    p = sub.add_parser("simulate", parents=[common], help="simulate the N-agent game at equilibrium")
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--reps", type=int, default=200)
    p = sub.add_parser("study", parents=[common], help="empirical-measure convergence ladder")
    p.add_argument("--Ns", type=_int_list, default=[10, 100, 1000])
    p.add_argument("--reps", type=int, default=200)
    p = sub.add_parser("gap", parents=[common], help="epsilon-Nash gap sweep")
    p.add_argument("--Ns", type=_int_list, default=[10, 100, 1000])
    p.add_argument("--reps", type=int, default=200)
    sub.add_parser("constants", parents=[common], help="growth-constant diagnostics")
    return parser


def _resolve_config(arg: str) -> dict:
    if arg in BUILTIN_CONFIGS and not Path(arg).exists():
        return copy.deepcopy(BUILTIN_CONFIGS[arg])
    return load_config(arg)


def _write(out: Path, name: str, text: str, written: list) -> None:
    path = out / name
    with open(path, "w", newline="") as fh:
        fh.write(text)
    written.append(name)


def _solve(model, args) -> MfeSolution:
    opts = MfeOptions(
        horizon=args.horizon,
        tol_tail=args.tol_tail,
        max_iters=args.max_iters,
        tol_flow=args.tol_flow,
        tol_exploit=args.tol_exploit,
        damping=args.damping,
    )
    sol = solve_mfe(model, opts)
    if not sol.converged:
        log.warning("equilibrium search stopped after %d iterations (residual %.3g, exploitability %.3g)",
                    sol.iterations, sol.residual_flow, sol.exploitability)
    return sol


def _execute(args, out: Path, written: list, record: dict) -> int:
    cfg = _resolve_config(args.config)
    record["config"] = cfg
    model = model_from_config(cfg)
    record["model_hash"] = model.fingerprint()
    workers = resolve_workers(args.workers)
    record["workers"] = workers

    if args.command == "constants":
        c = estimate_growth_constants(model, default_probes(model))
        _write(out, "constants.json", json.dumps(c.as_dict(), indent=2, sort_keys=True) + "\n", written)
        record["result"] = c.as_dict()
        return EXIT_OK

    sol = _solve(model, args)
    record["solution"] = sol.summary()
    status = EXIT_OK if sol.converged else EXIT_NOT_CONVERGED
    if args.command == "solve":
        _write(out, "flow.csv", sol.flow.to_csv(), written)
        _write(out, "policy.csv", sol.policy.to_csv(), written)
        _write(out, "values.csv", sol.values.to_csv(), written)
        _write(out, "solution.json", sol.to_json(), written)
        return status

    T = sol.horizon
    if args.command == "simulate":
        rep = simulate(model, SimConfig(N=args.N, T=T, reps=args.reps, policy=sol.policy,
                                        master_seed=args.seed, workers=workers), reference_flow=sol.flow)
        _write(out, "costs.csv", rep.costs_csv(), written)
        _write(out, "distances.csv", rep.distances_csv(), written)
        record["result"] = rep.summary()
    elif args.command == "study":
        st = empirical_convergence_study(model, sol.policy, sol.flow, args.Ns, args.reps,
                                         master_seed=args.seed, workers=workers)
        _write(out, "study.csv", st.to_csv(), written)
        record["result"] = {"Ns": list(st.Ns), "loglog_slope": st.slope}
    elif args.command == "gap":
        sw = nash_gap_sweep(model, sol, args.Ns, args.reps, master_seed=args.seed, workers=workers)
        _write(out, "gap_costs.csv", sw.costs_csv(), written)
        _write(out, "gap.csv", sw.gap_csv(), written)
        record["result"] = [
            {"N": e.N, "gap": e.gap, "stderr": e.stderr, "upper": e.upper, "best": e.best, "tail": e.tail}
            for e in sw.estimates
        ]
    return status


def run(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    out = Path(args.out)
    written: list = []
    record = {
        "command": args.command,
        "argv": argv,
        "version": __version__,
        "seed": args.seed,
        "options": {k: v for k, v in vars(args).items() if k not in ("command", "verbose")},
    }
    start = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        code = _execute(args, out, written, record)
    except (ConfigurationError, StabilityError, DomainError) as exc:
        print(f"mfgkit: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelIntegrityError as exc:
        print(f"mfgkit: model integrity violation: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except OSError as exc:
        print(f"mfgkit: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    record["outputs"] = list(written)
    record["exit_code"] = code
    record["wall_seconds"] = time.perf_counter() - start
    # written last, once every referenced output exists
    (out / "manifest.json").write_text(manifest_json(record))
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
