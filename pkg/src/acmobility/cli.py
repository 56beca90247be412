"""Command-line entry point: ``acmobility [--config FILE] [--preset NAME] [--sweep AXIS] ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PRESETS, SWEEP_AXES, ConfigError, load_config
from .harness import emit_outputs, run_point, run_sweep

log = logging.getLogger("acmobility")


def build_parser():
    p = argparse.ArgumentParser(
        prog="acmobility",
        description="Allen-Cahn simulation with variable mobility, a posteriori estimators and "
                    "conditional stability certificates.",
    )
    p.add_argument("--config", type=Path, help="key = value configuration file (all keys optional)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named starting configuration")
    p.add_argument("--sweep", choices=SWEEP_AXES, help="parameter sweep axis ('none' for a single run)")
    p.add_argument("--out", type=Path, help="output directory (default: config key 'out')")
    p.add_argument("--workers", type=int, help="worker processes for sweeps")
    p.add_argument("--full-scale", action="store_true", default=None,
                   help="use the large sweep grids instead of the desk-scale ones")
    p.add_argument("--no-eigen", action="store_true", help="skip eigenvalues (and hence the certificate)")
    p.add_argument("--plots", action="store_true", help="write SVG log-log plots for sweeps")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"preset": args.preset, "sweep": args.sweep, "workers": args.workers,
                 "full_scale": args.full_scale, "out": None if args.out is None else str(args.out)}
    if args.no_eigen:
        overrides["eigen"] = False
    try:
        cfg = load_config(args.config, **overrides)
    except (ConfigError, OSError) as exc:
        print(f"acmobility: configuration error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    try:
        if cfg.sweep == "none":
            res = run_point(cfg)
            emit_outputs(res, out)
            if res.certificate is not None:
                print(res.certificate.report(), end="")
            print(f"wrote {out}")
        else:
            rows, slopes = run_sweep(cfg, out, plots=args.plots)
            for s in slopes:
                print(f"{s['quantity']:>22s} vs {s['x']:<6s} slope {s['slope']:+.3f}  R^2 {s['r2']:.3f}"
                      f"  ({s['n_used']} pts, {s['n_dropped']} dropped)")
            failed = [r for r in rows if r["status"] != "ok"]
            for r in failed:
                print(f"point k={r['k']}: {r['status']}", file=sys.stderr)
            print(f"wrote {out}")
            return 1 if failed else 0
    except OSError as exc:
        print(f"acmobility: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
