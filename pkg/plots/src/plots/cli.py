"""Command line entry: render figures from JSON specs."""
import argparse
import sys

from .errors import PlotsError
from .figures import load_spec, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plots", description="Render figures from experiment artifacts.")
    sub = parser.add_subparsers(dest="command", required=True)
    cmd = sub.add_parser("render", help="render one figure from a JSON spec")
    cmd.add_argument("--spec", required=True, metavar="FILE",
                     help="path to a FigureSpec JSON document")
    args = parser.parse_args(argv)
    try:
        out = render(load_spec(args.spec))
    except PlotsError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
