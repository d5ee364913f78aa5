import os
import subprocess
import sys

import numpy as np
import pytest

from dtdy import _kernels_py, kernels

compiled = pytest.importorskip("dtdy._kernels", reason="compiled extension not built")

CASES = [(1, 1, 5, 7, 3, 1), (2, 3, 8, 9, 3, 2), (1, 4, 6, 6, 1, 1), (2, 2, 7, 11, 2, 3)]


def test_compiled_backend_selected_by_default():
    assert kernels.BACKEND == "cython"


@pytest.mark.parametrize("B,C,F,T,k,s", CASES)
def test_backends_bit_identical(B, C, F, T, k, s):
    rng = np.random.default_rng(B * 100 + C * 10 + k)
    xp = rng.standard_normal((B, C, F, T))
    a, b = _kernels_py.im2col(xp, k, k, s, s), compiled.im2col(xp, k, k, s, s)
    assert a.shape == b.shape and a.tobytes() == b.tobytes()
    g = rng.standard_normal(a.shape)
    assert _kernels_py.col2im(g, F, T, s, s).tobytes() == compiled.col2im(g, F, T, s, s).tobytes()


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((2, 3, 8, 9))
    cols = kernels.im2col(xp, 3, 3, 2, 2)
    g = rng.standard_normal(cols.shape)
    assert abs(np.sum(cols * g) - np.sum(xp * kernels.col2im(g, 8, 9, 2, 2))) < 1e-10


def test_dispatch_accepts_any_layout():
    x = np.asfortranarray(np.random.default_rng(1).standard_normal((1, 2, 6, 5)))
    assert kernels.im2col(x, 3, 3, 1, 1).tobytes() == _kernels_py.im2col(np.ascontiguousarray(x), 3, 3, 1, 1).tobytes()


def test_fallback_selected_by_environment():
    code = ("import numpy as np; from dtdy import kernels, tensor as T; "
            "x = T.Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 9)), requires_grad=True); "
            "w = T.Tensor(np.random.default_rng(1).standard_normal((4, 3, 3, 3)), requires_grad=True); "
            "tape = T.Tape(); tape.__enter__(); y = T.sum_(T.square(T.conv2d(x, w, 2, 1))); tape.__exit__(None, None, None); "
            "T.backward(tape, y); import sys; sys.stdout.write(kernels.BACKEND + ' ' + (y.data.tobytes() + x.grad.tobytes() + w.grad.tobytes()).hex())")
    out = {}
    for pure in (False, True):
        env = {k: v for k, v in os.environ.items() if k != "DTDY_PURE_PYTHON"}
        if pure:
            env["DTDY_PURE_PYTHON"] = "1"
        backend, digest = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                                         check=True).stdout.split()
        out[backend] = digest
    assert set(out) == {"cython", "python"}
    assert out["cython"] == out["python"]
