"""Gradient check across seeds, widths, grid sizes and attention modes."""

import argparse
import itertools

from tilepool.connector import GradCheckDims, grad_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--eps", type=float, default=1e-5)
    args = ap.parse_args()

    failures = 0
    for seed, (d_v, d_l), grid, mode in itertools.product(
        range(args.seeds), [(1, 2), (2, 3), (4, 6)], [(2, 2), (3, 4), (5, 5)], ("local", "global")
    ):
        dims = GradCheckDims(d_v=d_v, d_l=d_l, grid_h=grid[0], grid_w=grid[1], crops=2)
        report = grad_check(seed, dims, mode=mode, eps=args.eps)
        worst = max(report.errors, key=report.errors.get)
        failures += not report.passed
        print(f"seed={seed} d_v={d_v} d_l={d_l} grid={grid[0]}x{grid[1]} {mode:<6} "
              f"worst={worst}:{report.errors[worst]:.2e} {'PASS' if report.passed else 'FAIL'}")
    print(f"{failures} failing configurations")
    raise SystemExit(1 if failures else 0)


if __name__ == "__main__":
    main()
