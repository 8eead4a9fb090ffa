#!/usr/bin/env python3
"""Regenerate the cached training experiments under artifacts/.

Usage: python3 scripts/run_experiments.py [--only NAME ...] [--force] [-v]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

import experiments  # noqa: E402


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--only", nargs="*", choices=sorted(experiments.RUNNERS),
                        help="run only the named experiments")
    parser.add_argument("--force", action="store_true",
                        help="rerun even when cached results exist")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    names = args.only or list(experiments.RUNNERS)
    for name in names:
        if not args.force and experiments.load_results(name) is not None:
            print(f"{name}: cached, skipping")
            continue
        print(f"{name}: running", flush=True)
        results = experiments.RUNNERS[name](verbose=args.verbose)
        wall = results["wall_seconds"]
        print(f"{name}: done in {wall / 60.0:.1f} min")
    return 0


if __name__ == "__main__":
    sys.exit(main())
