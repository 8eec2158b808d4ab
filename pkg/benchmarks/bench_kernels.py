#!/usr/bin/env python3
"""Time the compiled kernels against the numpy fallback on the same inputs."""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from canonet import _kernels_py, kernels
from canonet.rng import Rng

try:
    from canonet import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def cases(scale: int) -> dict:
    r = Rng(0)
    x, w, b = r.normal((8 * scale, 12, 12)), r.normal((16 * scale, 8 * scale, 3, 3)), r.normal(
        16 * scale)
    u = np.maximum(r.normal((24 * scale, 32)), 0.0)
    u[1::3] = 1.5 * u[::3][: len(u[1::3])]
    a, ref = r.normal((24 * scale, 72)), r.normal((24 * scale, 72))
    res = kernels.residual_matrix(a, ref, 1e-12, True, impl=_kernels_py)
    return {
        "conv2d": lambda impl: kernels.conv2d(x, w, b, 1, 1, 1, impl=impl),
        "proportional_pairs": lambda impl: kernels.proportional_pairs(u, 1e-6, 1e-3, 3, impl=impl),
        "residual_matrix": lambda impl: kernels.residual_matrix(a, ref, 1e-12, True, impl=impl),
        "greedy_match": lambda impl: kernels.greedy_match(res, impl=impl),
    }


def best_of(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scale", type=int, default=1, help="problem size multiplier")
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    args = parser.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`",
              file=sys.stderr)
        return 1
    rows = []
    for name, fn in cases(args.scale).items():
        t_py = best_of(lambda: fn(_kernels_py), args.repeat)
        t_c = best_of(lambda: fn(compiled), args.repeat)
        rows.append({"kernel": name, "python_s": t_py, "compiled_s": t_c, "speedup": t_py / t_c})
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        print(f"{'kernel':<20}{'python':>12}{'compiled':>12}{'speedup':>10}")
        for row in rows:
            print(f"{row['kernel']:<20}{row['python_s'] * 1e3:>10.3f}ms"
                  f"{row['compiled_s'] * 1e3:>10.3f}ms{row['speedup']:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
