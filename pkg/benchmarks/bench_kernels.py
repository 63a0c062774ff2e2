"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py --repeats 5 --json bench.json

Each row reports the best of ``--repeats`` wall-clock runs per backend after
one warm-up call (which also absorbs numba's JIT compile). Both backends are
checked to agree before timing.
"""

import argparse
import json
import platform
import time

import numpy as np

from voxsegnet import _accel, kernels, ops
from voxsegnet.models import ArchitectureSpec, build_model
from voxsegnet.tensor import Tensor
from voxsegnet.trainer import batch_loss
from voxsegnet.voxel import VoxelGrid


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_cases(rng, R, C, dtype):
    x = rng.standard_normal((4, C, R, R, R)).astype(dtype)
    for k, r in ((1, 1), (3, 1), (3, 3), (3, 5)):
        w = rng.standard_normal((C, C, k, k, k)).astype(dtype)
        pad = ops.same_padding(k, r)
        g = rng.standard_normal(x.shape).astype(dtype)
        yield (f"conv fwd k{k} r{r}", lambda x=x, w=w, r=r, p=pad: kernels.conv3d_forward(x, w, r, 1, p))
        yield (f"conv grad-in k{k} r{r}",
               lambda g=g, w=w, r=r, p=pad: kernels.conv3d_grad_input(g, w, x.shape, r, 1, p))
        yield (f"conv grad-w k{k} r{r}",
               lambda g=g, r=r, p=pad, s=w.shape: kernels.conv3d_grad_weight(g, x, s, r, 1, p))


def other_cases(rng, R, C, dtype):
    x = rng.standard_normal((4, C, R, R, R)).astype(dtype)
    out, idx = kernels.max_pool3d_forward(x)
    yield "max-pool fwd", lambda: kernels.max_pool3d_forward(x)
    yield "max-pool bwd", lambda: kernels.max_pool3d_backward(np.ones_like(out), idx)
    keys = rng.integers(0, R ** 3, 200_000)
    labels = rng.integers(1, 5, keys.size)
    yield "majority vote (200k pts)", lambda: kernels.majority_vote(keys, labels)

    occ = rng.random((R, R, R)) < 0.08
    grids = [VoxelGrid(occ, np.where(occ, rng.integers(1, 5, occ.shape), 0))] * 4
    model = build_model(ArchitectureSpec("voxsegnet", R, 4, C, C // 2), seed=0, dtype=dtype)

    def step():
        model.zero_grad()
        batch_loss(model, grids)[1].backward()

    yield "voxsegnet fwd+bwd (batch 4)", step


def agree(fn):
    _accel.set_backend("numpy")
    a = fn()
    _accel.set_backend("numba")
    b = fn()
    a = a[0] if isinstance(a, tuple) else a
    b = b[0] if isinstance(b, tuple) else b
    if a is None:
        return 0.0
    return float(np.abs(np.asarray(a, float) - np.asarray(b, float)).max())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--res", type=int, default=32)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--precision", choices=("float32", "float64"), default="float32")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--json", help="also write the rows as JSON")
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    _accel.set_threads(args.threads)
    dtype = np.dtype(args.precision).type
    rng = np.random.default_rng(0)
    cases = list(conv_cases(rng, args.res, args.channels, dtype)) + \
        list(other_cases(rng, args.res, args.channels, dtype))

    rows = []
    print(f"R={args.res} C={args.channels} {args.precision} threads={args.threads} "
          f"numpy {np.__version__} python {platform.python_version()}")
    print(f"{'kernel':30s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max diff':>9s}")
    for name, fn in cases:
        diff = agree(fn)
        t = {}
        for backend in ("numpy", "numba"):
            _accel.set_backend(backend)
            t[backend] = best_of(fn, args.repeats)
        rows.append({"kernel": name, "numpy_s": t["numpy"], "numba_s": t["numba"], "max_diff": diff})
        print(f"{name:30s} {1e3 * t['numpy']:10.2f} {1e3 * t['numba']:10.2f} "
              f"{t['numpy'] / t['numba']:8.2f} {diff:9.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"config": vars(args), "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
