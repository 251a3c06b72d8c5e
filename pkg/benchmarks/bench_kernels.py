"""Compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--n-cells 400] [--repeat 5]

Prints best-of-repeat wall time per call and the speedup, after checking that
both backends agree on the inputs used.
"""
import argparse
import timeit

import numpy as np

from delayflow import _kernels_py as py
from delayflow._backend import compiled_kernels as cy
from delayflow.spatial import FieldState, assemble, make_grid, mass_band


def inputs(n_cells: int, n_hist: int = 200):
    grid = make_grid(2.0, n_cells)
    eps = 0.05
    forms = assemble(grid, 1.0)
    z = FieldState.from_functions(grid, lambda s: 0.5 * np.sin(np.pi * s / 2.0),
                                  lambda s: 0.25 * np.pi * np.cos(np.pi * s / 2.0))
    mc = mass_band(grid, np.full(grid.n_gauss, 0.3))
    chol = np.ascontiguousarray(py.band_cholesky(forms.operator(eps)))
    dN, gw = np.ascontiguousarray(grid.dN), np.ascontiguousarray(grid.weights)
    rhs = py.band_matvec(forms.operator(eps), z.dofs) - py.band_matvec(mc, z.dofs)
    rng = np.random.default_rng(0)
    m = [np.ascontiguousarray(rng.random((n_hist, grid.n_gauss))) for _ in range(3)]
    Z = np.ascontiguousarray(rng.standard_normal((n_hist + 1, grid.n_gauss)))
    return {
        "band_cholesky": ((forms.operator(eps),), {}),
        "band_solve": ((chol, z.dofs), {}),
        "band_matvec": ((forms.operator(eps), z.dofs), {}),
        "nonlinear_load": ((z.dofs, n_cells, dN, gw), {}),
        "picard_solve": ((chol, mc, rhs, forms.gram, eps, 0.9 * z.dofs, n_cells, dN, gw, 1e-10, 200), {}),
        "history_quadratic": ((m[0], m[1], m[2], Z, n_hist), {}),
    }


def _first(x):
    return x[0] if isinstance(x, tuple) else x


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-cells", type=int, default=400)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if cy is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    cases = inputs(args.n_cells)
    print(f"n_cells = {args.n_cells}")
    print(f"{'kernel':<20}{'compiled [us]':>15}{'numpy [us]':>15}{'speedup':>10}{'max diff':>12}")
    for name, (a, kw) in cases.items():
        fc, fp = getattr(cy, name), getattr(py, name)
        diff = float(np.max(np.abs(np.asarray(_first(fc(*a, **kw))) - np.asarray(_first(fp(*a, **kw))))))
        number = max(1, int(0.2 / max(timeit.timeit(lambda: fp(*a, **kw), number=1), 1e-6)))
        tc = min(timeit.repeat(lambda: fc(*a, **kw), number=number, repeat=args.repeat)) / number
        tp = min(timeit.repeat(lambda: fp(*a, **kw), number=number, repeat=args.repeat)) / number
        print(f"{name:<20}{tc * 1e6:>15.1f}{tp * 1e6:>15.1f}{tp / tc:>10.2f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
