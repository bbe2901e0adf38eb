"""Command-line entry point: ``regenlab <command> ...``.

On failure the last stderr line is ``error: {"command": ..., "type": ..., "message": ...}``
and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from ..attacks import DEFAULTS, AttackConfig, AttackDeps, parse_param, run_attack
from ..core import Image, Message, RngStream, load_image, save_image
from ..diffusion import MixturePrior, make_schedule
from ..theory import theory_grid, write_theory_csv
from ..watermark import SpreadSpectrumKey, decode, embed, keygen
from .config import ExperimentConfig, load_config
from .experiment import REPORT_COLUMNS, rereport, run_experiment, run_sweep
from .fit import fit_prior

log = logging.getLogger("regenlab")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, output=args.out, threads=args.threads)


def _key_from_args(args, image: Image) -> SpreadSpectrumKey:
    if args.key and os.path.exists(args.key) and not args.new_key:
        return SpreadSpectrumKey.load(args.key)
    beta = args.beta if args.beta is not None else 0.02 * np.sqrt(image.size)
    key = keygen(args.k, image.shape, beta, args.key_seed, args.mode)
    if args.key:
        key.save(args.key)
    return key


def cmd_embed(args) -> int:
    image = load_image(args.image)
    key = _key_from_args(args, image)
    if args.bits:
        msg = Message.from_string(args.bits)
    else:
        seed = args.seed if args.seed is not None else 0
        msg = Message.random(key.k, RngStream(seed, "cli/message").generator())
    save_image(embed(image, msg, key), args.output)
    print(json.dumps({"message": msg.to_string(), "beta": key.beta, "k": key.k, "mode": key.mode}))
    return 0


def cmd_decode(args) -> int:
    image = load_image(args.image)
    key = SpreadSpectrumKey.load(args.key)
    res = decode(image, key)
    out = {"bits": res.bits.to_string(), "correlations": res.correlations.tolist()}
    if args.bits:
        truth = Message.from_string(args.bits)
        out["bit_accuracy"] = float(np.mean(truth.bits == res.bits.bits))
        out["exact_match"] = bool(truth == res.bits)
    print(json.dumps(out))
    return 0


def cmd_attack(args) -> int:
    image = load_image(args.image)
    params = {}
    for item in args.param or []:
        name, _, value = item.partition("=")
        params[name] = parse_param(args.kind, name, value)
    seed = args.seed if args.seed is not None else 0
    cfg = AttackConfig(args.kind, params, seed)
    prior = MixturePrior.load(args.prior) if args.prior else None
    key = SpreadSpectrumKey.load(args.key) if args.key else None
    deps = AttackDeps(prior, make_schedule(args.schedule, args.steps), key)
    save_image(run_attack(image, cfg, deps), args.output)
    print(json.dumps({"params": cfg.echo()}))
    return 0


def cmd_run(args) -> int:
    table = run_experiment(_config(args))
    for r in table.rows:
        print(f"{r.attack_id:>24s}  detect={r.detection_rate:.3f}  bitacc={r.bit_accuracy:.4f}  psnr={r.psnr_db:.2f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    strengths = [float(s) for s in args.strengths.replace(",", " ").split()] if args.strengths else None
    for r in run_sweep(cfg, strengths):
        print(f"{r.strength:5.2f} {r.variant:>16s}  detect={r.row.detection_rate:.3f}  bitacc={r.row.bit_accuracy:.4f}  psnr={r.row.psnr_db:.2f}")
    return 0


def cmd_theory(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rows = theory_grid(trials=args.trials, seed=seed)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    write_theory_csv(rows, os.path.join(out, "theory.csv"))
    worst = max(abs(r["p_bit_mc"] - r["p_bit_theory"]) for r in rows)
    print(json.dumps({"rows": len(rows), "max_abs_bit_deviation": worst}))
    return 0


def cmd_fit_prior(args) -> int:
    images = [load_image(p) for p in args.images]
    seed = args.seed if args.seed is not None else 0
    history: list[float] = []
    prior = fit_prior(images, args.components, args.iterations, RngStream(seed, "fit-prior").generator(), history)
    prior.save(args.output)
    print(json.dumps({"J": prior.J, "dim": prior.dim, "final_loglik": history[-1] if history else None}))
    return 0


def cmd_report(args) -> int:
    columns = tuple(args.columns.split(",")) if args.columns else REPORT_COLUMNS
    unknown = set(columns) - set(REPORT_COLUMNS)
    if unknown:
        raise ValueError(f"unknown report columns: {sorted(unknown)}")
    out = args.output or os.path.join(args.out or os.path.dirname(args.trials) or ".", "report.csv")
    rows = rereport(args.trials, out, columns)
    print(json.dumps({"rows": len(rows), "output": out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=default, help="experiment config file (INI)")
        g.add_argument("--seed", type=int, default=default, help="master seed (u64)")
        g.add_argument("--out", default=default, help="output directory")
        g.add_argument("--threads", type=int, default=default, help="worker threads")
        g.add_argument("-v", "--verbose", action="store_true", default=default or False)
        return g

    # flags may sit before or after the subcommand; SUPPRESS keeps the
    # subparser from clobbering values parsed at the top level
    p = argparse.ArgumentParser(prog="regenlab", parents=[global_flags(None)], description=__doc__.splitlines()[0])
    common = global_flags(argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    def keyopts(sp):
        sp.add_argument("--key", help="WMK1 key file (read if present, else written)")
        sp.add_argument("--new-key", action="store_true", help="overwrite --key with a fresh key")
        sp.add_argument("--k", type=int, default=32)
        sp.add_argument("--beta", type=float, help="default 0.02*sqrt(N)")
        sp.add_argument("--key-seed", type=int, default=1)
        sp.add_argument("--mode", choices=("plain", "informed"), default="informed")

    sp = sub.add_parser("embed", parents=[common], help="embed a message")
    sp.add_argument("image")
    sp.add_argument("output")
    sp.add_argument("--bits", help="message as 0/1 text; random if omitted")
    keyopts(sp)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("decode", parents=[common], help="decode a message")
    sp.add_argument("image")
    sp.add_argument("--key", required=True)
    sp.add_argument("--bits", help="true message, to report accuracy")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("attack", parents=[common], help="apply one attack")
    sp.add_argument("image")
    sp.add_argument("output")
    sp.add_argument("--kind", required=True, choices=sorted(DEFAULTS))
    sp.add_argument("--param", action="append", metavar="NAME=VALUE")
    sp.add_argument("--prior", help="mixture prior JSON (regen kinds)")
    sp.add_argument("--key", help="WMK1 key (fgsm, regen_guided)")
    sp.add_argument("--schedule", default="linear", choices=("linear", "cosine"))
    sp.add_argument("--steps", type=int, default=1000)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("run", parents=[common], help="full attack-grid experiment")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", parents=[common], help="regeneration strength sweep")
    sp.add_argument("--strengths", help="comma-separated strengths in [0, 1]")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("theory", parents=[common], help="closed-form vs Monte Carlo decode rates")
    sp.add_argument("--trials", type=int, default=100_000)
    sp.set_defaults(func=cmd_theory)

    sp = sub.add_parser("fit-prior", parents=[common], help="fit a mixture prior to images")
    sp.add_argument("images", nargs="+")
    sp.add_argument("--components", "-J", type=int, default=4)
    sp.add_argument("--iterations", type=int, default=50)
    sp.add_argument("--output", "-o", required=True)
    sp.set_defaults(func=cmd_fit_prior)

    sp = sub.add_parser("report", parents=[common], help="re-aggregate a trials.csv")
    sp.add_argument("trials")
    sp.add_argument("--output", "-o")
    sp.add_argument("--columns", help=f"subset of: {','.join(REPORT_COLUMNS)}")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        if args.verbose:
            log.exception("command failed")
        err = {"command": args.command, "type": type(exc).__name__, "message": str(exc)}
        print("error: " + json.dumps(err), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
