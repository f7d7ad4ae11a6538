"""Command-line entry: mfcplot --in run/train_log.csv [--in ...] --kind
loss_compare --out fig.png [options]."""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, PlotJob, SchemaError, render


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfcplot",
                                 description="Render experiment CSVs to figures.")
    ap.add_argument("--in", dest="inputs", action="append", required=True,
                    help="input CSV (repeat for multi-curve kinds)")
    ap.add_argument("--kind", required=True, choices=KINDS)
    ap.add_argument("--out", required=True, help="output image path")
    ap.add_argument("--label", dest="labels", action="append", default=[],
                    help="legend label per input, in order")
    ap.add_argument("--smooth", type=int, default=50,
                    help="moving-average window for loss curves")
    ap.add_argument("--linear", action="store_true",
                    help="linear instead of log loss axis")
    ap.add_argument("--times", default="0.0,0.5,1.0",
                    help="snapshot times, comma separated")
    ap.add_argument("--target", default=None,
                    help="cross-hair position x,y for crowd snapshots")
    return ap


def job_from_args(args) -> PlotJob:
    times = tuple(float(t) for t in args.times.split(",") if t != "")
    target = None
    if args.target:
        parts = [float(p) for p in args.target.split(",")]
        if len(parts) != 2:
            raise ValueError("--target expects x,y")
        target = (parts[0], parts[1])
    return PlotJob(kind=args.kind, inputs=tuple(args.inputs), output=args.out,
                   labels=tuple(args.labels), smooth_window=args.smooth,
                   log_scale=not args.linear, times=times, target=target)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = render(job_from_args(args))
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
