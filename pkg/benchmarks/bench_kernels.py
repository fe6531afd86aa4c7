"""Compare the compiled QP kernels with the numpy fallback.

Times batched forward solves and KKT backward solves on random HOCBF-sized
problems and checks that both backends agree.

    python3 benchmarks/bench_kernels.py --batch 2000 --repeat 3
"""
import argparse
import time

import numpy as np

from barriernet import _backend, diffqp
from barriernet.qpcore import SolverConfig


def random_batch(rng, n, q, r):
    M = rng.normal(size=(n, q, q))
    H = M @ M.transpose(0, 2, 1) + q * np.eye(q)
    F = rng.normal(size=(n, q)) * 3
    G = rng.normal(size=(n, r, q))
    h = rng.normal(size=(n, r)) + 1.0
    lb = -np.full(q, 2.0)
    ub = np.full(q, 2.0)
    return H, F, G, h, lb, ub


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=2000)
    p.add_argument("--q", type=int, default=2)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    if _backend.BACKEND != "cython":
        print("compiled kernels not built; only the fallback is available")
    rng = np.random.default_rng(args.seed)
    H, F, G, h, lb, ub = random_batch(rng, args.batch, args.q, args.r)
    g = rng.normal(size=(args.batch, args.q))
    backends = ["python"] + (["cython"] if _backend.BACKEND == "cython" else [])
    rows, outs = [], {}
    for name in backends:
        cfg = SolverConfig(backend=name)
        t_fwd, fwd = best_of(lambda: diffqp.forward_batch(H, F, G, h, lb, ub, cfg), args.repeat)
        t_bwd, bwd = best_of(lambda: diffqp.backward_batch(fwd, g, cfg), args.repeat)
        outs[name] = (fwd, bwd)
        rows.append((name, t_fwd, t_bwd))

    print(f"batch={args.batch} q={args.q} r={args.r} (best of {args.repeat})")
    print(f"{'backend':<8} {'forward us/QP':>14} {'backward us/QP':>15}")
    for name, tf, tb in rows:
        print(f"{name:<8} {1e6 * tf / args.batch:14.2f} {1e6 * tb / args.batch:15.2f}")
    if len(rows) == 2:
        print(f"speedup  {rows[0][1] / rows[1][1]:14.1f}x {rows[0][2] / rows[1][2]:14.1f}x")
        (fp, bp), (fc, bc) = outs["python"], outs["cython"]
        ok = (fp.status == 0) & (fc.status == 0)
        print(f"max |u_py - u_cy| = {np.max(np.abs(fp.u[ok] - fc.u[ok]), initial=0.0):.3g}, "
              f"max |dF_py - dF_cy| = {np.max(np.abs(bp[0][ok] - bc[0][ok]), initial=0.0):.3g}")


if __name__ == "__main__":
    main()
