"""Command line entry point.

Configuration precedence, lowest first: built-in defaults, the ``--config``
YAML file, the ``SPECDIFF_OUT`` / ``SPECDIFF_WORKERS`` environment variables,
then explicit flags.

Exit codes: 0 success, 2 configuration error, 3 missing dependency (run the
earlier stage first), 4 statistical test failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import apply_overrides, load_config, save_config
from .errors import ConfigError, DependencyMissingError, ScheduleMismatchError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_STAT = 0, 2, 3, 4

COMMANDS = {
    "gen-data": "generate scripted-expert demonstrations",
    "train-target": "train the target denoiser on the demonstrations",
    "distill": "distill the drafter from the target",
    "train-scheduler": "train the PPO parameter scheduler",
    "eval": "closed-loop evaluation of a sampler configuration",
    "bench": "NFE accounting on the analytic Gaussian target",
    "couple-test": "Monte-Carlo check of the reflection coupling",
    "sample-test": "KS check of speculative against ancestral samples",
    "config": "print the effective configuration",
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", metavar="DIR", help="artifact directory (env SPECDIFF_OUT)")
    p.add_argument("--workers", type=int, help="parallel episode workers (env SPECDIFF_WORKERS)")
    p.add_argument("--mode", choices=("stochastic", "threshold"), help="acceptance rule")
    p.add_argument("--k", type=int, metavar="INT", help="draft horizon")
    p.add_argument("--threshold", type=float, metavar="FLOAT", help="acceptance threshold")
    p.add_argument("--sigma-scale", type=float, metavar="FLOAT",
                   help="verification sigma multiplier")
    p.add_argument("--episodes", type=int, metavar="INT", help=_EPISODES_HELP)


_EPISODES_HELP = ("episode count: demonstrations (gen-data), evaluation episodes (eval), "
                  "episodes per PPO update (train-scheduler), chains (bench, sample-test), "
                  "draws per case (couple-test)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specdiff", description="Speculative sampling for diffusion policies.",
        epilog="Exit codes: 0 ok, 2 config error, 3 missing dependency, 4 statistical failure.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _common(p)
        if name == "eval":
            p.add_argument("--policy", choices=("baseline", "fixed", "scheduler"), default="fixed",
                           help="controller: plain sampling, fixed parameters, or the scheduler")
            p.add_argument("--events", action="store_true", help="also write the round event log")
        if name == "train-scheduler":
            p.add_argument("--iterations", type=int, metavar="INT", help="PPO updates")
        if name in ("bench", "sample-test"):
            p.add_argument("--bias", type=float, metavar="FLOAT",
                           help="drafter mean bias in step-sigma units")
            p.add_argument("--steps", type=int, metavar="INT", help="diffusion steps T")
        if name in ("train-target", "distill"):
            p.add_argument("--iterations", type=int, metavar="INT", help="optimizer steps")
    return parser


def resolve_config(args):
    cfg = load_config(args.config)
    env = {}
    if os.environ.get("SPECDIFF_OUT"):
        env["out"] = os.environ["SPECDIFF_OUT"]
    if os.environ.get("SPECDIFF_WORKERS"):
        try:
            env["workers"] = int(os.environ["SPECDIFF_WORKERS"])
        except ValueError as exc:
            raise ConfigError(["SPECDIFF_WORKERS: expected an integer"]) from exc
    cfg = apply_overrides(cfg, env)
    flags = {"seed": args.seed, "out": args.out, "workers": args.workers,
             "spec.accept_mode": args.mode, "spec.draft_horizon": args.k,
             "spec.accept_threshold": args.threshold, "spec.sigma_scale": args.sigma_scale}
    ep = {"gen-data": "data.episodes", "eval": "eval.episodes",
          "train-scheduler": "scheduler.episodes_per_iter"}.get(args.command)
    if ep:
        flags[ep] = args.episodes
    it = {"train-target": "target.iterations", "distill": "distill.iterations",
          "train-scheduler": "scheduler.iterations"}.get(args.command)
    if it:
        flags[it] = getattr(args, "iterations", None)
    return apply_overrides(cfg, flags)


def _write_json(out: Path, name: str, doc) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def run(args) -> int:
    from . import pipeline as pl

    cfg = resolve_config(args)
    out = Path(cfg.out)
    log = print
    cmd = args.command
    if cmd == "config":
        sys.stdout.write(cfg.dump())
        return EXIT_OK
    if cmd in ("gen-data", "train-target", "distill", "train-scheduler"):
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / f"{cmd}.config.yaml")
    if cmd == "gen-data":
        pl.gen_data(cfg, out, log)
    elif cmd == "train-target":
        pl.train_target(cfg, out, log)
    elif cmd == "distill":
        pl.distill(cfg, out, log)
    elif cmd == "train-scheduler":
        pl.train_scheduler_stage(cfg, out, log)
    elif cmd == "eval":
        pl.eval_stage(cfg, out, args.policy, log=log, keep_events=args.events)
    elif cmd == "bench":
        res = pl.bench(cfg.spec.draft_horizon, args.mode or "stochastic", cfg.spec.accept_threshold,
                       args.episodes or 50, args.bias or 0.0, args.steps or 100,
                       seed=cfg.seed, sigma_scale=cfg.spec.sigma_scale)
        path = _write_json(out, "bench.json", res)
        pl.write_manifest(out, "bench", cfg, outputs=[path], extra=res)
        log(f"NFE {res['nfe_percent']:.2f}%  speedup {res['speedup']:.3f}x  "
            f"target passes {res['mean_target_passes']:.2f}  acceptance {res['acceptance_rate']:.3f}")
    elif cmd == "couple-test":
        rows = pl.couple_test(args.episodes or 1_000_000, cfg.seed)
        path = _write_json(out, "couple_test.json", rows)
        pl.write_manifest(out, "couple-test", cfg, outputs=[path])
        for r in rows:
            log(f"m_r={r['m_r']:+.2f} m_s={r['m_s']:+.2f} sigma={r['sigma']:.2f}  "
                f"KS={r['statistic']:.5f} crit={r['critical']:.5f}  "
                f"{'PASS' if r['passed'] else 'FAIL'}")
        return EXIT_OK if all(r["passed"] for r in rows) else EXIT_STAT
    elif cmd == "sample-test":
        bias = 0.2 if args.bias is None else args.bias
        k = 5 if args.k is None else args.k
        res = pl.sample_test(args.episodes or 200_000, args.steps or 50, k,
                             bias, args.mode or "stochastic", cfg.seed,
                             threshold=cfg.spec.accept_threshold)
        path = _write_json(out, "sample_test.json", res)
        pl.write_manifest(out, "sample-test", cfg, outputs=[path])
        log(f"{res['accept_mode']} K={res['draft_horizon']} bias={res['bias']}: "
            f"KS={res['statistic']:.5f} crit={res['critical']:.5f}  "
            f"{'PASS' if res['passed'] else 'FAIL'}")
        return EXIT_OK if res["passed"] else EXIT_STAT
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except ScheduleMismatchError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyMissingError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
