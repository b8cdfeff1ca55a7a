"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the desk-scale training run (64x64 patches, 8-64 channels).
"""

import argparse
import timeit

import numpy as np

from latentflow import _pykernels
from latentflow.kernels import backends


def cases(rng):
    x16 = rng.standard_normal((1, 64, 64, 16)).astype(np.float32)
    x8 = rng.standard_normal((2, 64, 64, 8)).astype(np.float32)
    col = _pykernels.im2col(x16, 5)
    pool_in = rng.standard_normal((1, 64, 64, 32)).astype(np.float32)
    _, arg = _pykernels.maxpool2_forward(pool_in)
    g_pool = rng.standard_normal((1, 32, 32, 32)).astype(np.float32)
    z = rng.standard_normal((4, 64, 64, 1)).astype(np.float32)
    pix = rng.uniform(-2, 66, (4, 64, 64, 2)).astype(np.float32)
    gz = rng.standard_normal(z.shape).astype(np.float32)
    return [
        ("im2col k=5 (1,64,64,16)", lambda k: k.im2col(x16, 5)),
        ("im2col k=3 (2,64,64,8)", lambda k: k.im2col(x8, 3)),
        ("col2im k=5 (1,64,64,16)", lambda k: k.col2im(col, x16.shape, 5)),
        ("maxpool2 fwd (1,64,64,32)", lambda k: k.maxpool2_forward(pool_in)),
        ("maxpool2 bwd (1,64,64,32)", lambda k: k.maxpool2_backward(g_pool, arg, pool_in.shape)),
        ("bilinear fwd (4,64,64,1)", lambda k: k.bilinear_forward(z, pix)),
        ("bilinear bwd (4,64,64,1)", lambda k: k.bilinear_backward(z, pix, gz, True, True)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    impls = backends()
    names = list(impls)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, fn in cases(rng):
        times = []
        for n in names:
            k = impls[n]
            fn(k)
            times.append(min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) * 1e3)
        line = f"{label:<28}" + "".join(f"{t:>10.3f}ms" for t in times)
        if len(times) > 1:
            line += f"{times[0] / times[1]:>11.1f}x"
        print(line)
    if "cython" not in impls:
        print("compiled extension not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
