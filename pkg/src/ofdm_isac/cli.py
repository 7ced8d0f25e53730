"""Command line entry point: ``ofdm-isac {calibrate,crlb,harness}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from .crlb import average_bounds
from .detect import calibrate_beta, fwer_monte_carlo, fwer_theoretical
from .harness import run_all
from .scenario import load_config, table1_config


def _calibrate(args) -> int:
    beta = calibrate_beta(args.delta, args.shape, args.n)
    fwer = fwer_theoretical(beta, args.shape, args.n)
    w = csv.writer(sys.stdout, lineterminator="\n")
    header = ["delta", "shape", "n", "beta", "fwer_theoretical"]
    row = [args.delta, args.shape, args.n, f"{beta:.6f}", f"{fwer:.6g}"]
    if args.mc_check:
        p, se = fwer_monte_carlo(beta, args.shape, args.n, args.draws, np.random.default_rng(args.seed))
        header += ["fwer_mc", "fwer_mc_se"]
        row += [f"{p:.6g}", f"{se:.3g}"]
    w.writerow(header)
    w.writerow(row)
    return 0


def _crlb(args) -> int:
    base = load_config(args.config) if args.config else table1_config()
    e1 = base.tx_power_w[1] if args.e1 is None else args.e1
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["E0", "target", "DEB_clean", "DEB_all", "AEB_clean", "AEB_all"])
    for e0 in args.e0:
        cfg = base.with_powers(e0, *([e1] * base.num_iue))
        b = average_bounds(cfg, args.n_rue, args.n_iue, args.overlap, args.realizations,
                           np.random.default_rng(args.seed))
        for l in range(cfg.num_objects):
            w.writerow([e0, l + 1, repr(float(b.deb_clean[l])), repr(float(b.deb_all[l])),
                        repr(float(b.aeb_clean[l])), repr(float(b.aeb_all[l]))])
    return 0


def _harness(args) -> int:
    cfg = load_config(args.config) if args.config else table1_config()
    exps = ("beta", "fwer", "power", "rmse") if args.experiment == "all" else (args.experiment,)
    results = run_all(cfg, args.out, exps, seed=args.seed, trials=args.trials)
    ok = True
    for name, table in results.items():
        for c in table.checks:
            mark = "PASS" if c.passed else ("FAIL" if c.binding else "warn")
            print(f"[{mark}] {name}: {c.name} ({c.detail})")
        ok &= table.passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ofdm-isac", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="threshold factor for a target FWER")
    c.add_argument("--delta", type=float, required=True)
    c.add_argument("--shape", type=float, required=True, help="Gamma shape (symbols x antennas)")
    c.add_argument("--n", type=int, required=True, help="number of compared powers")
    c.add_argument("--mc-check", action="store_true", help="also estimate the FWER by Monte Carlo")
    c.add_argument("--draws", type=int, default=1_000_000)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_calibrate)

    b = sub.add_parser("crlb", help="delay/angle error bounds")
    b.add_argument("--config", help="scenario JSON (default: reference scenario)")
    b.add_argument("--overlap", type=int, default=8)
    b.add_argument("--e0", type=float, nargs="+", required=True)
    b.add_argument("--e1", type=float)
    b.add_argument("--n-rue", type=int, default=32)
    b.add_argument("--n-iue", type=int, default=32)
    b.add_argument("--realizations", type=int, default=50)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=_crlb)

    h = sub.add_parser("harness", help="Monte Carlo experiments")
    hs = h.add_subparsers(dest="action", required=True)
    r = hs.add_parser("run")
    r.add_argument("--experiment", choices=["beta", "fwer", "power", "rmse", "all"], default="all")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--trials", type=int, help="override every sweep's trial count")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=_harness)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
