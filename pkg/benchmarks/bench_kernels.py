"""Compiled step kernels vs the numpy/scipy fallback.

Times the three kernels on Magnus-sized batches and one end-to-end S1 propagation,
and checks both backends agree.  Run with ``python3 benchmarks/bench_kernels.py``.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from adiabatic_lab import _kernels_py

try:
    from adiabatic_lab import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def _omegas(n, d, rng, scale=0.5):
    # skew-Hermitian, like a Magnus step of a skew-adjoint generator; keeps the chain bounded
    X = rng.standard_normal((n, d, d)) + 1j * rng.standard_normal((n, d, d))
    return scale * (X - np.conj(np.swapaxes(X, 1, 2))) / (2 * np.sqrt(d))


def bench_kernels(dims=(2, 3, 4, 6, 8, 16), n=4096, repeat=5, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for d in dims:
        om = _omegas(n, d, rng)
        marks = np.arange(0, n + 1, 64, dtype=np.intp)
        start = np.eye(d, dtype=np.complex128)
        row = {"dim": d}
        for name, mod in (("python", _kernels_py), ("compiled", _compiled)):
            if mod is None:
                continue
            f_exp = lambda: mod.expm_batch(om)  # noqa: E731
            f_chain = lambda: mod.expm_chain(om, marks, start)  # noqa: E731
            row[f"{name}_expm"] = min(timeit.repeat(f_exp, number=1, repeat=repeat))
            row[f"{name}_chain"] = min(timeit.repeat(f_chain, number=1, repeat=repeat))
        if _compiled is not None:
            a = _kernels_py.expm_chain(om, marks, start)
            b = _compiled.expm_chain(om, marks, start)
            row["max_diff"] = float(np.max(np.abs(a - b)))
        rows.append(row)
    return rows


_E2E = """
import time
from adiabatic_lab import BACKEND
from adiabatic_lab.scenarios import load_scenario
from adiabatic_lab.adiabatic import gap_harness
scn = load_scenario("S1")
t0 = time.perf_counter()
r = gap_harness(scn, [2.0**-k for k in range(3, 11)], 65, 1e-11)
print(BACKEND, time.perf_counter() - t0, repr(float(r.sweeps["UV"].defects[-1])))
"""


def bench_end_to_end():
    out = {}
    for pure in ("0", "1"):
        env = dict(os.environ, ADIABATIC_LAB_PURE=pure)
        res = subprocess.run([sys.executable, "-c", _E2E], env=env, capture_output=True, text=True, check=True)
        backend, secs, last = res.stdout.split()
        out[backend] = (float(secs), float(last))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4096, help="batch size")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)
    if _compiled is None:
        print("compiled extension not available; timing the fallback only")
    print(f"{'dim':>4} {'py expm':>10} {'cy expm':>10} {'speedup':>8} {'py chain':>10} {'cy chain':>10} "
          f"{'speedup':>8} {'max diff':>10}")
    for r in bench_kernels(n=args.n, repeat=args.repeat):
        if "compiled_expm" in r:
            print(f"{r['dim']:>4} {r['python_expm']:>10.4f} {r['compiled_expm']:>10.4f} "
                  f"{r['python_expm'] / r['compiled_expm']:>8.1f} {r['python_chain']:>10.4f} "
                  f"{r['compiled_chain']:>10.4f} {r['python_chain'] / r['compiled_chain']:>8.1f} {r['max_diff']:>10.2e}")
        else:
            print(f"{r['dim']:>4} {r['python_expm']:>10.4f} {'-':>10} {'-':>8} {r['python_chain']:>10.4f}")
    if not args.skip_e2e:
        e2e = bench_end_to_end()
        print("\nS1 gap sweep (8 epsilons, grid 65, tol 1e-11):")
        for backend, (secs, last) in e2e.items():
            print(f"  {backend:<9} {secs:7.2f} s   sup|U-V| at eps=2^-10: {last:.15e}")


if __name__ == "__main__":
    main()
