"""Command line entry point: ``cfadapt {run,check,export}``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .config import ConfigError, load_config

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2

FIELDS = {"density": ("cell_data", "rho_hat"), "vm": ("cell_data", "von_mises"), "cnf": ("point_data", "cnf")}


def _parser():
    p = argparse.ArgumentParser(prog="cfadapt", description="Adaptive-mesh topology optimisation")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an optimisation")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="output directory (overrides run.output)")
    r.add_argument("-q", "--quiet", action="store_true")
    c = sub.add_parser("check", help="validate a config and print it fully resolved")
    c.add_argument("config")
    e = sub.add_parser("export", help="write one field of a VTK snapshot as CSV")
    e.add_argument("snapshot")
    e.add_argument("--field", choices=sorted(FIELDS), required=True)
    e.add_argument("--out", help="CSV path (default: stdout)")
    return p


def _export(args):
    from .vtk import read_vtu

    data = read_vtu(args.snapshot)
    where, name = FIELDS[args.field]
    vals = np.asarray(data[where][name], float)
    if where == "cell_data":
        pts = data["points"][data["connectivity"].reshape(-1, 4)].mean(axis=1)
        header = f"x,y,{name}"
        table = np.column_stack([pts[:, :2], vals])
    else:
        header = "x,y,fx,fy,magnitude"
        table = np.column_stack([data["points"][:, :2], vals[:, :2], np.linalg.norm(vals[:, :2], axis=1)])
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        np.savetxt(out, table, delimiter=",", header=header, comments="", fmt="%.10g")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "export":
        try:
            return _export(args)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    overrides = {"run.output": args.output} if getattr(args, "output", None) else None
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "check":
        from .config import config_text

        print(config_text(cfg), end="")
        return EXIT_OK

    from .driver import run

    if not args.quiet:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = run(cfg)
    print(f"{result.message}; artifacts in {result.output_dir}")
    return EXIT_SOLVER if result.status else EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
