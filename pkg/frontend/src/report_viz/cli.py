"""Script entry point: render figures and reports from exported files."""

from __future__ import annotations

import argparse
import sys

from .frames import FrameError
from .plots import plot_loss, plot_routing_heatmap
from .report import render_report


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="report-viz", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("loss", help="training + per-PL validation loss curves")
    p.add_argument("--metrics", action="append", required=True, metavar="[LABEL=]PATH",
                   help="metrics CSV; repeat with LABEL= prefixes to compare variants")
    p.add_argument("--out", required=True, help="output image (png/svg)")

    p = sub.add_parser("heatmap", help="PL-by-expert routing heatmap")
    p.add_argument("--routing", required=True, help="routing CSV")
    p.add_argument("--allocation", help="allocation JSON for group-boundary overlay")
    p.add_argument("--out", required=True, help="output image (png/svg)")

    p = sub.add_parser("report", help="HTML summary of results JSON files")
    p.add_argument("--results", action="append", required=True, help="results JSON; repeatable")
    p.add_argument("--ttests", help="optional paired t-test JSON")
    p.add_argument("--baseline", default="pl_moe", help="variant used for delta rows")
    p.add_argument("--out", required=True, help="output HTML path")

    args = parser.parse_args(argv)
    try:
        if args.command == "loss":
            metrics = {}
            for item in args.metrics:
                label, _, path = item.rpartition("=")
                metrics[label or f"run{len(metrics)}"] = path
            plot_loss(metrics, args.out)
        elif args.command == "heatmap":
            plot_routing_heatmap(args.routing, args.out, allocation=args.allocation)
        else:
            render_report(args.results, args.out, ttests_path=args.ttests,
                          baseline=args.baseline)
    except FrameError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
