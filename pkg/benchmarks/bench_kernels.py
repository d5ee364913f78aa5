"""Time the compiled im2col/col2im against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Also checks that both backends return bit-identical arrays and times one
full conv2d forward/backward per backend (selected via DTDY_PURE_PYTHON
in a subprocess, since the backend is fixed at import).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dtdy import _kernels_py

try:
    from dtdy import _kernels
except ImportError:  # extension not built
    _kernels = None

# (B, C, F, T, kernel, stride) covering the stem and each residual stage at width x0.25
SHAPES = [
    (1, 1, 66, 202, 3, 1),
    (1, 16, 66, 202, 3, 1),
    (1, 32, 34, 102, 3, 2),
    (1, 64, 18, 52, 3, 2),
    (1, 128, 10, 27, 3, 2),
]

CONV_SNIPPET = """
import numpy as np, time
from dtdy import tensor as T, kernels
x = T.Tensor(np.random.default_rng(0).standard_normal((4, 16, 64, 200)), requires_grad=True)
w = T.Tensor(np.random.default_rng(1).standard_normal((16, 16, 3, 3)), requires_grad=True)
best = 1e9
for _ in range({repeat}):
    t0 = time.perf_counter()
    with T.Tape() as tape:
        y = T.sum_(T.conv2d(x, w, 1, 1))
    T.backward(tape, y)
    best = min(best, time.perf_counter() - t0)
print(kernels.BACKEND, best)
"""


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        sys.exit("compiled extension not available; reinstall with Cython present")

    print(f"{'shape (B,C,F,T) k s':32s} {'im2col py':>10s} {'im2col cy':>10s} {'col2im py':>10s} {'col2im cy':>10s}")
    for B, C, F, T, k, s in SHAPES:
        xp = np.random.default_rng(0).standard_normal((B, C, F, T))
        cols_py, cols_cy = _kernels_py.im2col(xp, k, k, s, s), _kernels.im2col(xp, k, k, s, s)
        assert cols_py.tobytes() == cols_cy.tobytes()
        g = np.random.default_rng(1).standard_normal(cols_py.shape)
        assert _kernels_py.col2im(g, F, T, s, s).tobytes() == _kernels.col2im(g, F, T, s, s).tobytes()
        times = [
            best_of(lambda: _kernels_py.im2col(xp, k, k, s, s), args.repeat),
            best_of(lambda: _kernels.im2col(xp, k, k, s, s), args.repeat),
            best_of(lambda: _kernels_py.col2im(g, F, T, s, s), args.repeat),
            best_of(lambda: _kernels.col2im(g, F, T, s, s), args.repeat),
        ]
        label = f"({B},{C},{F},{T}) {k} {s}"
        print(f"{label:32s} " + " ".join(f"{t * 1e3:9.2f}ms" for t in times))

    print("\nconv2d forward+backward, (4,16,64,200) x (16,16,3,3):")
    for pure in ("", "1"):
        env = dict(os.environ, DTDY_PURE_PYTHON=pure) if pure else {k: v for k, v in os.environ.items()
                                                                        if k != "DTDY_PURE_PYTHON"}
        out = subprocess.run([sys.executable, "-c", CONV_SNIPPET.format(repeat=args.repeat)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:8s} {float(out[1]) * 1e3:8.1f} ms")


if __name__ == "__main__":
    main()
