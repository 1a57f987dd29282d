"""Run the desk-scale experiment and print its numbers.

    python3 scripts/desk_scale.py [--bundle DIR] [--quick]
"""
import argparse
import json
import logging
import sys

from afrpn.desk import DeskConfig, run_desk_scale


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bundle", default="desk_bundle", help="where to write diagnostics on failure")
    ap.add_argument("--quick", action="store_true", help="tiny run for smoke testing")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = DeskConfig(seed=args.seed)
    if args.quick:
        cfg = DeskConfig(train_scenes=20, test_scenes=5, rpn_iterations=20, e2e_iterations=10, seed=args.seed)

    res = run_desk_scale(cfg, args.bundle)
    print(res.rpn_table, end="")
    print(json.dumps(res.to_dict(), indent=1))
    return 0 if res.ok else 1


if __name__ == "__main__":
    sys.exit(main())
