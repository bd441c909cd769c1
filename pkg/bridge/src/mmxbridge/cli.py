"""Bridge CLI: serve a model over the prediction protocol, or export heatmaps.

    mmxbridge serve --model t1c-shape --stdio
    mmxbridge serve --model torchscript:model.pt --tcp 127.0.0.1:9000
    mmxbridge export --model linear:w.npy --dataset data/ \
        --methods gradient,integrated_gradients --out heatmaps/
"""

import argparse
import sys

from .attrib import METHODS, UnsupportedMethodError, export_heatmaps
from .models import load_model
from .protocol import serve_stdio, serve_tcp


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmxbridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="serve a model over the wire protocol")
    p.add_argument("--model", required=True)
    p.add_argument("--stdio", action="store_true")
    p.add_argument("--tcp", default=None, help="HOST:PORT to listen on")
    p.add_argument("--max-connections", type=int, default=None)

    p = sub.add_parser("export", help="export gradient/activation heatmaps")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--methods", required=True,
                   help="comma-separated subset of: " + ", ".join(METHODS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        model = load_model(args.model)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "serve":
        if args.tcp:
            host, _, port = args.tcp.rpartition(":")
            if not host or not port.isdigit():
                print(f"error: --tcp wants HOST:PORT, got {args.tcp!r}", file=sys.stderr)
                return 1
            serve_tcp(model, host, int(port), max_connections=args.max_connections)
        else:
            serve_stdio(model)
        return 0
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    try:
        index = export_heatmaps(model, args.dataset, methods, args.out, seed=args.seed)
    except UnsupportedMethodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(index)
    return 0


if __name__ == "__main__":
    sys.exit(main())
