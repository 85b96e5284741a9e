"""Numba kernels versus their numpy fallbacks.

Times every ``*_nb`` / ``*_np`` pair in :mod:`cmbrec.kernels` on inputs shaped
like one MovieLens-1M bandit iteration (5950 users, 3125 items, d=50, K=20),
checks that both produce the same output, and prints a table.

Usage::

    python3 benchmarks/bench_kernels.py              # full shapes
    python3 benchmarks/bench_kernels.py --scale 0.1  # quick run
    python3 benchmarks/bench_kernels.py --end-to-end # also time one reward
                                                     # evaluation per backend
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from cmbrec import kernels as kn


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n_users, n_items, d, k, rng):
    scores = rng.normal(size=(n_users, n_items))
    unit = rng.normal(size=(n_items, d))
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    lists = np.argsort(-scores, axis=1)[:, :k]
    topics = (rng.random((n_items, 18)) < 0.1).astype(np.uint8)
    pool = np.argsort(-scores, axis=1)[:, :100]
    rel = np.take_along_axis(scores, pool, axis=1)
    indptr = np.concatenate([[0], np.cumsum(rng.integers(20, 200, size=n_users))]).astype(np.int64)
    indices = np.concatenate(
        [np.sort(rng.choice(n_items, size=indptr[u + 1] - indptr[u], replace=False)) for u in range(n_users)]
    ).astype(np.int64)
    rows = rng.integers(n_users, size=3 * len(indices)).astype(np.int64)
    cols = rng.integers(n_items, size=len(rows)).astype(np.int64)
    batch = rng.integers(n_items, size=2048 * 3).astype(np.int64)
    grads = rng.normal(size=(d, len(batch)))
    param = rng.normal(size=(d, n_items))

    def adam(step):
        p, g, m, v = param.copy(), rng.normal(size=param.shape), np.zeros_like(param), np.zeros_like(param)
        return lambda: step(p, g, m, v, 0.005, 0.9, 0.999, 1e-8, 1)

    def scatter(step):
        target = np.zeros((d, n_items))
        return lambda: step(target, batch, grads)

    return [
        ("topk_rows", lambda f: lambda: f(scores, k), kn.topk_rows_nb, kn.topk_rows_np),
        ("ilad_rows", lambda f: lambda: f(lists, unit), kn.ilad_rows_nb, kn.ilad_rows_np),
        ("alpha_dcg_rows", lambda f: lambda: f(lists, topics, 0.5), kn.alpha_dcg_rows_nb, kn.alpha_dcg_rows_np),
        ("mmr_select", lambda f: lambda: f(pool, rel, unit, 0.9, k), kn.mmr_select_nb, kn.mmr_select_np),
        (
            "csr_contains",
            lambda f: lambda: f(indptr, indices, rows, cols) if f is kn.csr_contains_nb else f(indptr, indices, rows, cols, n_items),
            kn.csr_contains_nb,
            kn.csr_contains_np,
        ),
        ("scatter_add_cols", scatter, kn.scatter_add_cols_nb, kn.scatter_add_cols_np),
        ("adam_step", adam, kn.adam_step_nb, kn.adam_step_np),
    ]


def same(a, b):
    if a is None or b is None:
        return True  # in-place kernels; covered by the unit tests
    if a.dtype.kind == "f":
        return np.allclose(a, b, rtol=0, atol=1e-9)
    return np.array_equal(a, b)


_E2E = """
import sys, time
import numpy as np
from cmbrec._accel import BACKEND
from cmbrec.bandit import ObjectiveSpec, RewardFunction
from cmbrec.dataset import from_arrays
from cmbrec.models import LatentFactors
n_users, n_items, d = {n_users}, {n_items}, 50
rng = np.random.default_rng(0)
train = [np.sort(rng.choice(n_items, 80, replace=False)) for _ in range(n_users)]
valid = [np.sort(rng.choice(np.setdiff1d(np.arange(n_items), t), 10, replace=False)) for t in train]
test = [np.sort(rng.choice(np.setdiff1d(np.arange(n_items), np.union1d(t, v)), 10, replace=False))
        for t, v in zip(train, valid)]
topics = [sorted(rng.choice(18, 2, replace=False).tolist()) for _ in range(n_items)]
ds = from_arrays(train, valid, test, topics, n_items=n_items)
f = LatentFactors(rng.normal(size=(d, n_users)), rng.normal(size=(d, n_items)))
fn = RewardFunction(f, ds, ObjectiveSpec(diversity_metric="ilad", accuracy_metric="ndcg", lambda1=5.0, K=20))
delta = np.zeros((d, n_items))
fn(delta)
t0 = time.perf_counter()
for _ in range(3):
    fn(delta)
print(BACKEND, (time.perf_counter() - t0) / 3)
"""


def end_to_end(n_users, n_items):
    out = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ, CMBREC_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, "-c", _E2E.format(n_users=n_users, n_items=n_items)],
            env=env, capture_output=True, text=True, check=True,
        )
        name, secs = proc.stdout.split()
        out[name] = float(secs)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", type=float, default=1.0, help="fraction of the user/item counts")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)

    n_users = max(50, int(5950 * args.scale))
    n_items = max(200, int(3125 * args.scale))
    rng = np.random.default_rng(0)
    print(f"users={n_users} items={n_items} d=50 K=20 repeat={args.repeat}")
    print(f"{'kernel':<18}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}  match")
    for name, make, nb, np_ in cases(n_users, n_items, 50, 20, rng):
        make(nb)()  # compile outside the timed region
        a, b = make(nb)(), make(np_)()
        t_nb = best_of(make(nb), args.repeat)
        t_np = best_of(make(np_), args.repeat)
        print(f"{name:<18}{t_nb * 1e3:>12.2f}{t_np * 1e3:>12.2f}{t_np / t_nb:>9.1f}x  {same(a, b)}")

    if args.end_to_end:
        res = end_to_end(n_users, n_items)
        print(f"\none reward evaluation: numba {res['numba']:.3f}s, numpy {res['numpy']:.3f}s "
              f"({res['numpy'] / res['numba']:.1f}x)")


if __name__ == "__main__":
    main()
