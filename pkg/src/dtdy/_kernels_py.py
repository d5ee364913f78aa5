"""Pure-numpy im2col / col2im, used when the compiled extension is absent."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp: np.ndarray, kf: int, kt: int, sf: int, st: int) -> np.ndarray:
    """Unfold a padded (B, C, Hp, Wp) array into (B, F', T', C, kf, kt) patches."""
    win = sliding_window_view(xp, (kf, kt), axis=(2, 3))[:, :, ::sf, ::st]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def col2im(cols: np.ndarray, Hp: int, Wp: int, sf: int, st: int) -> np.ndarray:
    """Scatter-add patch gradients back onto the padded input grid."""
    B, Fo, To, C, kf, kt = cols.shape
    out = np.zeros((B, C, Hp, Wp))
    # descending offsets: same per-cell summation order as the compiled kernel
    for i in reversed(range(kf)):
        for j in reversed(range(kt)):
            out[:, :, i:i + sf * (Fo - 1) + 1:sf, j:j + st * (To - 1) + 1:st] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out
