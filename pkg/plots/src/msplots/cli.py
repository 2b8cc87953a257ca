"""Render one figure from a JSON spec: msinvert-plot --spec fig.json"""

import argparse
import sys

from .figures import InputSchemaError, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="msinvert-plot",
        description="Render a figure from pipeline CSV outputs")
    parser.add_argument("--spec", required=True, help="figure spec JSON")
    args = parser.parse_args(argv)
    try:
        out = render(args.spec)
    except (InputSchemaError, FileNotFoundError, ValueError) as exc:
        print(f"figure error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
