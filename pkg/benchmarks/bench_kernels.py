"""Compare the compiled patch kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Times im2col and col2im on their own, then a conv2d forward + backward and a
full training step of the desk-scale model with each backend swapped in.
Both backends must agree bitwise; the script exits non-zero if they do not.
"""
import argparse
import sys
import timeit
from contextlib import contextmanager

import numpy as np

from dualinc.data import OrientationSet
from dualinc.engine import Tensor, _kernels_py, backward, conv2d, kernels, sum_all
from dualinc.model import Model, preset
from dualinc.trainer import Batch, TrainConfig, compute_objective

try:
    from dualinc.engine import _ckernels
except ImportError:  # extension not built
    _ckernels = None


@contextmanager
def backend(module):
    saved = kernels.im2col, kernels.col2im
    kernels.im2col, kernels.col2im = module.im2col, module.col2im
    try:
        yield
    finally:
        kernels.im2col, kernels.col2im = saved


def best_of(fn, repeats):
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def patch_cases(rng):
    # (batch, channels, side, stride) in the shapes the small preset produces
    for n, c, side, stride in ((64, 3, 16, 1), (64, 16, 16, 2), (64, 32, 8, 1)):
        xp = np.pad(rng.random((n, c, side, side), dtype=np.float32), ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho = (side + 2 - 3) // stride + 1
        yield f"N={n} C={c} {side}x{side} s{stride}", xp, stride, ho


def conv_step(x, w, b):
    xt, wt, bt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)
    backward(sum_all(conv2d(xt, wt, bt, stride=1, padding=1)))
    return xt.grad


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    rows, mismatch = [], False

    for label, xp, stride, ho in patch_cases(rng):
        n, c, hp, wp = xp.shape
        cols = {m: m.im2col(xp, 3, 3, stride, ho, ho) for m in (_ckernels, _kernels_py)}
        mismatch |= cols[_ckernels].tobytes() != cols[_kernels_py].tobytes()
        g = rng.random(cols[_ckernels].shape, dtype=np.float32)
        for name, fn in (
            ("im2col", lambda m: m.im2col(xp, 3, 3, stride, ho, ho)),
            ("col2im", lambda m: m.col2im(g, n, c, hp, wp, 3, 3, stride, ho, ho)),
        ):
            back = {m: fn(m) for m in (_ckernels, _kernels_py)}
            mismatch |= back[_ckernels].tobytes() != back[_kernels_py].tobytes()
            t_c = best_of(lambda: fn(_ckernels), args.repeats)
            t_p = best_of(lambda: fn(_kernels_py), args.repeats)
            rows.append((f"{name} {label}", t_c, t_p))

    x = rng.random((64, 16, 16, 16), dtype=np.float32)
    w = rng.standard_normal((16, 16, 3, 3)).astype(np.float32)
    b = np.zeros(16, np.float32)
    timings, grads = {}, {}
    for m in (_ckernels, _kernels_py):
        with backend(m):
            timings[m] = best_of(lambda: conv_step(x, w, b), args.repeats)
            grads[m] = conv_step(x, w, b)
    mismatch |= grads[_ckernels].tobytes() != grads[_kernels_py].tobytes()
    rows.append(("conv2d fwd+bwd N=64 C=16 16x16", timings[_ckernels], timings[_kernels_py]))

    cfg = TrainConfig(orientations=OrientationSet((0, 90)))
    images = rng.random((32, 3, 16, 16), dtype=np.float32)
    batch = Batch.fresh(images, rng.integers(0, 4, 32))
    for m in (_ckernels, _kernels_py):
        model = Model(preset("small"), 4, 2, seed=0)

        def step():
            backward(compute_objective(model, batch, None, cfg).total)
            model.zero_grad()

        with backend(m):
            timings[m] = best_of(step, max(3, args.repeats // 4))
    rows.append(("train step, small preset, 32 images x 2 views", timings[_ckernels], timings[_kernels_py]))

    width = max(len(r[0]) for r in rows)
    print(f"{'case':{width}s}  {'cython ms':>10s}  {'numpy ms':>10s}  {'speedup':>7s}")
    for label, t_c, t_p in rows:
        print(f"{label:{width}s}  {t_c * 1e3:10.3f}  {t_p * 1e3:10.3f}  {t_p / t_c:6.2f}x")
    print("backends agree bitwise" if not mismatch else "BACKEND MISMATCH")
    return 1 if mismatch else 0


if __name__ == "__main__":
    sys.exit(main())
