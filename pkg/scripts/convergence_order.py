"""Measure the reconstruction order of the inverse split on f(x) = x + x^3 over [0, 2]."""
import argparse

import numpy as np
from scipy.optimize import brentq

from equilibrage.semicalc import GridFunction, inverse_split


def exact_inverse(y):
    return np.array([brentq(lambda x: x + x ** 3 - v, 0.0, 2.0, xtol=1e-15)
                     for v in y])


def reconstruction_error(m: int, analytic: bool = True) -> float:
    x = np.linspace(0.0, 2.0, m + 1)
    f = GridFunction.from_callable(lambda t, x: x + x ** 3, [0.0], x,
                                   (lambda t, x: 1 + 3 * x ** 2) if analytic else None)
    y = np.linspace(0.0, 10.0, m + 1)
    g = exact_inverse(y)[None, :]
    return inverse_split(f, y, g).residual


def orders(grids, analytic=True):
    errs = [reconstruction_error(m, analytic) for m in grids]
    return errs, [float(np.log2(a / b)) for a, b in zip(errs, errs[1:])]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grids", type=int, nargs="+", default=[40, 80, 160, 320])
    ap.add_argument("--numeric", action="store_true", help="central-difference derivatives")
    args = ap.parse_args()
    errs, ords = orders(args.grids, not args.numeric)
    for m, e in zip(args.grids, errs):
        print(f"cells {m:5d}  error {e:.3e}")
    print("observed orders", " ".join(f"{o:.3f}" for o in ords))


if __name__ == "__main__":
    main()
