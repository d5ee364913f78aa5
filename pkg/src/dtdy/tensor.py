"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input has ``requires_grad`` set. Outside a tape everything runs as
plain numpy (inference mode). Gradients are pulled back with
:func:`backward`.

BLAS-backed primitives (``conv2d``, ``affine``) iterate over the leading batch
axis so that each sample's arithmetic is identical regardless of what else is
in the batch.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from dtdy import kernels

_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


class Tensor:
    """An n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self.name = name

    # -- gradient buffer -------------------------------------------------
    @property
    def grad(self) -> np.ndarray | None:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    # -- conveniences ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axes=None, keepdims=False):
        return sum_(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are appended in execution order, which is
    a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside the block (nested tapes resume afterwards)."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, tuple(parents), backward))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every grad-enabled tensor.

    Calling twice without zeroing adds the second set of gradients to the
    first.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    found = False
    for node in reversed(tape.nodes):
        key = id(node.out)
        g = grads.pop(key, None)
        owners.pop(key, None)
        if g is None:
            continue
        found = True
        node.out._grad = g if node.out._grad is None else node.out._grad + g
        pgrads = node.backward(g)
        for parent, pg in zip(node.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            pk = id(parent)
            if pk in grads:
                grads[pk] = grads[pk] + pg
            else:
                grads[pk] = pg
                owners[pk] = parent
    if not found:
        raise ValueError("loss is not reachable from the tape")
    for key, g in grads.items():
        leaf = owners[key]
        if leaf._grad is None:
            leaf._grad = np.array(g, dtype=np.float64, copy=True)
        else:
            leaf._grad += g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); the gradient passes only where a > lo."""
    a = as_tensor(a)
    mask = a.data > lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(a.data[idx], dtype=np.float64), (a,), bw)


def take(a, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis`` (repeated indices accumulate in backward)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    axis = axis % a.ndim

    def bw(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.data, indices, axis=axis), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat needs at least one tensor")
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = tuple(ax % ndim if -ndim <= ax < ndim else _bad_axis(ax, ndim) for ax in axes)
    if len(set(norm)) != len(norm):
        raise ValueError(f"repeated axis in {tuple(axes)}")
    return norm


def _bad_axis(ax: int, ndim: int):
    raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")


def sum_(a, axes=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axes(axes, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def reduce_mean(a, axes=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over ``axes`` (all axes when None)."""
    a = as_tensor(a)
    ax = _norm_axes(axes, a.ndim)
    shape = a.shape
    count = int(np.prod([shape[i] for i in ax])) if ax else 1
    out = a.data.mean(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along one axis."""
    a = as_tensor(a)
    x = a.data
    out = np.sqrt((x * x).sum(axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * x / out,)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return _make(res, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _make(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    lp = log_softmax(logits, axis=1)
    return neg(reduce_mean(index(lp, (np.arange(n), labels))))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _make(ad @ bd, (a, b), bw)


matmul_batched = matmul


def affine(x, weight, bias=None) -> Tensor:
    """y = x @ weight.T + bias over the trailing axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"affine: input trailing dim {x.shape[-1]} does not match weight {weight.shape}"
        )
    xd, wd = x.data, weight.data
    wt = wd.T
    if xd.ndim == 1:
        out = xd @ wt
    else:
        out = np.empty(xd.shape[:-1] + (wd.shape[0],))
        for i in range(xd.shape[0]):
            out[i] = xd[i] @ wt
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[0],):
            raise ValueError(f"affine: bias shape {bias.shape} != ({wd.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[0])
        x2 = xd.reshape(-1, wd.shape[1])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        res = [gx, gw]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return _make(out, parents, bw)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv2d(x, kernel, stride=1, padding=0) -> Tensor:
    """2D cross-correlation with zero padding.

    x: (B, C_in, F, T); kernel: (C_out, C_in, kf, kt).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    sf, st = _pair(stride)
    pf, pt = _pair(padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, F, T = x.shape
    Co, Ci, kf, kt = kernel.shape
    if Ci != C:
        raise ValueError(f"conv2d: input has C_in={C} channels but kernel expects C_in={Ci}")
    if sf < 1 or st < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kf > F + 2 * pf or kt > T + 2 * pt:
        raise ValueError(f"conv2d: kernel {kf}x{kt} larger than padded input {F + 2 * pf}x{T + 2 * pt}")
    Fo, To = conv_output_size(F, kf, sf, pf), conv_output_size(T, kt, st, pt)
    if kf == kt == 1 and pf == pt == 0:
        return _conv1x1(x, kernel, sf, st)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pf, pf), (pt, pt))) if (pf or pt) else np.ascontiguousarray(x.data)
    w2 = kernel.data.reshape(Co, -1)
    w2t = np.ascontiguousarray(w2.T)
    out = np.empty((B, Co, Fo, To))
    for b in range(B):
        cols = kernels.im2col(xp[b:b + 1], kf, kt, sf, st).reshape(Fo * To, -1)
        out[b] = (cols @ w2t).T.reshape(Co, Fo, To)

    def bw(g):
        gw = np.zeros_like(w2)
        gxp = np.empty(xp.shape)
        for b in range(B):
            cols = kernels.im2col(xp[b:b + 1], kf, kt, sf, st).reshape(Fo * To, -1)
            g2 = g[b].reshape(Co, Fo * To)
            gw += g2 @ cols
            dcols = np.ascontiguousarray((g2.T @ w2).reshape(1, Fo, To, Ci, kf, kt))
            gxp[b] = kernels.col2im(dcols, xp.shape[2], xp.shape[3], sf, st)[0]
        gx = gxp[:, :, pf:pf + F, pt:pt + T]
        return (np.ascontiguousarray(gx), gw.reshape(kernel.shape))

    return _make(out, (x, kernel), bw)


def _conv1x1(x: Tensor, kernel: Tensor, sf: int, st: int) -> Tensor:
    xd = x.data
    xs = np.ascontiguousarray(xd[:, :, ::sf, ::st])
    B, C, Fo, To = xs.shape
    w2 = kernel.data.reshape(kernel.shape[0], C)
    out = np.empty((B, w2.shape[0], Fo, To))
    for b in range(B):
        out[b] = (w2 @ xs[b].reshape(C, -1)).reshape(-1, Fo, To)

    def bw(g):
        gw = np.zeros_like(w2)
        gx = np.zeros(xd.shape)
        for b in range(B):
            g2 = g[b].reshape(w2.shape[0], -1)
            gw += g2 @ xs[b].reshape(C, -1).T
            gx[b, :, ::sf, ::st] = (w2.T @ g2).reshape(C, Fo, To)
        return (gx, gw.reshape(kernel.shape))

    return _make(out, (x, kernel), bw)


def batch_norm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over (B, F, T).

    In training mode the running statistics arrays are updated in place
    (unbiased variance, as is conventional).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d expects (B, C, F, T), got {x.shape}")
    B, C, F, T = x.shape
    n = B * F * T
    if n == 0:
        raise ValueError("batch_norm2d: zero-size batch")
    xd = x.data
    gd = gamma.data.reshape(1, C, 1, 1)
    if training:
        if n < 2:
            raise ValueError("batch_norm2d: training mode needs B*F*T >= 2")
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu.reshape(1, C, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu = running_mean
        var = running_var
        xc = xd - mu.reshape(1, C, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(1, C, 1, 1)
    out = xhat * gd + beta.data.reshape(1, C, 1, 1)

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        if training:
            dxhat = g * gd
            dx = (inv.reshape(1, C, 1, 1) / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = g * (gd * inv.reshape(1, C, 1, 1))
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between the tape gradient and central differences.

    ``x`` may be a single tensor or a sequence passed positionally to ``f``.
    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    With ``max_coords`` only a random subset of coordinates per input is
    probed.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    probes = [Tensor(t.data.copy(), requires_grad=True) for t in xs]
    with Tape() as tape:
        y = f(*probes)
    if y.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(y.data)):
        raise ValueError("grad_check: f(x) is not finite")
    backward(tape, y)
    worst = 0.0
    for k, p in enumerate(probes):
        analytic = p.grad
        flat = p.data.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval_scalar(f, probes)
            flat[i] = orig - h
            fm = _eval_scalar(f, probes)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


def _eval_scalar(f, args) -> float:
    with no_grad():
        val = f(*[Tensor(a.data) for a in args]).data
    if not np.all(np.isfinite(val)):
        raise ValueError("grad_check: f is not finite near x")
    return float(np.asarray(val).reshape(-1)[0])
