"""Slow, obviously-correct reference implementations used by the tests."""

import numpy as np

from dtdy import tensor as T
from dtdy.tensor import Tape, Tensor


def conv2d_loops(x, w, stride=(1, 1), pad=(0, 0)):
    """Direct summation cross-correlation with zero padding."""
    B, C, F, Tn = x.shape
    Co, Ci, kf, kt = w.shape
    sf, st = stride
    pf, pt = pad
    xp = np.zeros((B, C, F + 2 * pf, Tn + 2 * pt))
    xp[:, :, pf:pf + F, pt:pt + Tn] = x
    Fo = (F + 2 * pf - kf) // sf + 1
    To = (Tn + 2 * pt - kt) // st + 1
    out = np.zeros((B, Co, Fo, To))
    for b in range(B):
        for o in range(Co):
            for i in range(Fo):
                for j in range(To):
                    acc = 0.0
                    for c in range(C):
                        for u in range(kf):
                            for v in range(kt):
                                acc += xp[b, c, i * sf + u, j * st + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def matmul_loops(a, b):
    m, n = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            out[i, j] = sum(a[i, k] * b[k, j] for k in range(n))
    return out


def dft_power(frame, n_fft):
    """|X[k]|^2 for k = 0..n_fft/2 by the DFT definition."""
    x = np.zeros(n_fft)
    x[:len(frame)] = frame
    n = np.arange(n_fft)
    out = np.empty(n_fft // 2 + 1)
    for k in range(n_fft // 2 + 1):
        e = np.exp(-2j * np.pi * k * n / n_fft)
        out[k] = abs(np.sum(x * e)) ** 2
    return out


def rates_sweep(target, nontarget, thr):
    frr = sum(1 for s in target if s < thr) / len(target)
    far = sum(1 for s in nontarget if s >= thr) / len(nontarget)
    return frr, far


def eer_sweep(target, nontarget):
    """EER by walking every distinct score and interpolating at the crossing."""
    th = sorted(set(target) | set(nontarget))
    prev = None
    for t in th:
        frr, far = rates_sweep(target, nontarget, t)
        if far - frr <= 0:
            if prev is None or far == frr:
                return frr
            pfrr, pfar = prev
            d0, d1 = pfar - pfrr, far - frr
            a = d0 / (d0 - d1)
            return pfrr + a * (frr - pfrr)
        prev = (frr, far)
    raise AssertionError("curves never cross")


def min_dcf_sweep(target, nontarget, p=0.05):
    """Minimum normalised cost over every possible decision split."""
    scores = sorted(set(target) | set(nontarget))
    cands = [-np.inf] + [(a + b) / 2 for a, b in zip(scores, scores[1:])] + [np.inf]
    best = np.inf
    for t in cands:
        pm, pf = rates_sweep(target, nontarget, t)
        best = min(best, (p * pm + (1 - p) * pf) / min(p, 1 - p))
    return best


def module_grad_error(module, loss_fn, h=1e-6, max_coords=6, seed=0):
    """Finite-difference check of every parameter of ``module``.

    ``loss_fn()`` builds the scalar loss from the module's current
    parameters. Returns the worst relative error over probed coordinates.
    """
    rng = np.random.default_rng(seed)
    params = module.parameters() if hasattr(module, "parameters") else list(module)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    T.backward(tape, loss)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = range(flat.size) if flat.size <= max_coords else rng.choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            with T.no_grad():
                fp = loss_fn().item()
            flat[i] = orig - h
            with T.no_grad():
                fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(a.reshape(-1)[i] - num) / max(1.0, abs(a.reshape(-1)[i])))
    return worst


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))))


def tensor(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)
