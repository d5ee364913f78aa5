"""Backend selection for the convolution hot loops.

The compiled Cython module is used when it was built at install time;
otherwise the numpy implementation is loaded. Setting ``DTDY_PURE_PYTHON=1``
forces the fallback. Both backends give bit-identical results.
"""

import os

import numpy as np

if os.environ.get("DTDY_PURE_PYTHON"):
    from dtdy import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from dtdy import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from dtdy import _kernels_py as _impl

        BACKEND = "python"



def im2col(xp, kf, kt, sf, st):
    """Patch matrix of a padded (B, C, F, T) array; any memory layout is accepted."""
    return _impl.im2col(np.ascontiguousarray(xp, dtype=np.float64), kf, kt, sf, st)


def col2im(cols, Hp, Wp, sf, st):
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), Hp, Wp, sf, st)


__all__ = ["BACKEND", "im2col", "col2im"]
