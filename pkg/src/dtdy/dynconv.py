"""Decomposed temporal dynamic convolution (DTDY) and the TDY baseline.

A DTDY layer uses a different kernel for every time bin::

    W(t) = W0 + P @ Phi(t) @ Q^T

``W0`` is a static kernel, ``Q`` compresses the input into an ``L``-channel
latent space with a k x k convolution, ``Phi(t)`` is an L x L matrix produced
per time bin by a two-layer bottleneck, and ``P`` expands back to the output
channels with a 1 x 1 convolution. The layer never materialises ``W(t)``;
:func:`dtdy_explicit_oracle` does, and exists to check the factored path.

The TDY layer instead mixes ``K`` basis kernels with per-time-bin softmax
attention.
"""

from __future__ import annotations

import math

import numpy as np

from dtdy import tensor as T
from dtdy.nn import Module, uniform_fan_in
from dtdy.tensor import Tensor


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def latent_dim(c_in: int, c_out: int) -> int:
    """Rank of the dynamic residual: round(sqrt(2*c_in + 2*c_out)), at least 1."""
    return max(1, _round_half_up(math.sqrt(2 * c_in + 2 * c_out)))


def hidden_dim(c_in: int, f_nom: int, r: float) -> int:
    """Bottleneck width of the generator: (c_in + F) scaled by the reduction ratio r."""
    return max(1, _round_half_up((c_in + f_nom) * r))


def time_descriptor(x: Tensor) -> Tensor:
    """Per-time-bin pooled descriptor, shape (B, T, F + C).

    The first F entries are the channel-average of each frequency row, the
    remaining C entries the frequency-average of each channel.
    """
    over_c = T.reduce_mean(x, axes=(1,))  # B, F, T
    over_f = T.reduce_mean(x, axes=(2,))  # B, C, T
    return T.transpose(T.concat([over_c, over_f], axis=1), (0, 2, 1))


def _output_time_index(t_in: int, t_out: int, stride: int) -> np.ndarray:
    idx = np.arange(t_out) * stride
    if t_out and idx[-1] >= t_in:
        raise ValueError(f"output bin {t_out - 1} maps past the last input bin {t_in - 1}")
    return idx


class DtdyConv2d(Module):
    """Decomposed temporal dynamic convolution layer (bias-free)."""

    kind = "dtdy"

    def __init__(
        self,
        c_in: int,
        c_out: int,
        f_nom: int,
        k: int = 3,
        stride=1,
        padding=1,
        r: float = 1 / 8,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.f_nom, self.r = f_nom, r
        self.stride, self.padding = T._pair(stride), T._pair(padding)
        self.L = L = latent_dim(c_in, c_out)
        self.H = H = hidden_dim(c_in, f_nom, r)
        fan = c_in * k * k
        self.W0 = self.add_param("W0", uniform_fan_in(rng, (c_out, c_in, k, k), fan, np.sqrt(2.0)))
        self.Q = self.add_param("Q", uniform_fan_in(rng, (L, c_in, k, k), fan))
        self.P = self.add_param("P", uniform_fan_in(rng, (c_out, L, 1, 1), L))
        self.fc1_w = self.add_param("fc1_w", uniform_fan_in(rng, (H, c_in + f_nom), c_in + f_nom, np.sqrt(2.0)))
        self.fc1_b = self.add_param("fc1_b", np.zeros(H))
        # zero so the layer starts as the static convolution
        self.fc2_w = self.add_param("fc2_w", np.zeros((L * L, H)))
        self.fc2_b = self.add_param("fc2_b", np.zeros(L * L))

    def forward(self, x: Tensor) -> Tensor:
        return dtdy_forward(x, self)


def phi_generator(x: Tensor, layer: DtdyConvParams) -> Tensor:
    """Temporal dynamic matrices, shape (B, T, L, L), one per input time bin."""
    B, C, F, Tn = x.shape
    if F != layer.f_nom:
        raise ValueError(f"phi_generator built for F={layer.f_nom}, got input with F={F}")
    if C != layer.c_in:
        raise ValueError(f"phi_generator built for C_in={layer.c_in}, got {C}")
    d = time_descriptor(x)
    hidden = T.relu(T.affine(d, layer.fc1_w, layer.fc1_b))
    phi = T.affine(hidden, layer.fc2_w, layer.fc2_b)
    return T.reshape(phi, (B, Tn, layer.L, layer.L))


DtdyConvParams = DtdyConv2d


def dtdy_forward(x: Tensor, layer: DtdyConv2d, phi: Tensor | None = None) -> Tensor:
    """Factored DTDY convolution.

    ``phi`` overrides the generated (B, T, L, L) matrices; used for testing.
    Phi for output bin t' is taken from input bin t' * stride_t.
    """
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != layer.c_in:
        raise ValueError(f"dtdy_forward: expected (B, {layer.c_in}, F, T), got {x.shape}")
    if x.shape[2] != layer.f_nom:
        raise ValueError(f"dtdy_forward: layer built for F={layer.f_nom}, got F={x.shape[2]}")
    s, p = layer.stride, layer.padding
    y0 = T.conv2d(x, layer.W0, s, p)
    z = T.conv2d(x, layer.Q, s, p)  # B, L, F', T'
    if phi is None:
        phi = phi_generator(x, layer)
    phi = T.as_tensor(phi)
    B, _, Fo, To = z.shape
    idx = _output_time_index(x.shape[3], To, s[1])
    phi_o = T.take(phi, idx, axis=1)  # B, T', L, L
    u = T.matmul(phi_o, T.transpose(z, (0, 3, 1, 2)))  # B, T', L, F'
    u = T.transpose(u, (0, 2, 3, 1))
    return T.add(y0, T.conv2d(u, layer.P))


def assembled_kernels(layer: DtdyConv2d, phi: np.ndarray) -> np.ndarray:
    """W0 + P Phi Q^T for every (batch, time bin): shape (B, T, C_out, C_in, k, k)."""
    P2 = layer.P.data[:, :, 0, 0]
    dyn = np.einsum("ol,btlm,mcij->btocij", P2, phi, layer.Q.data)
    return layer.W0.data[None, None] + dyn


def _conv_per_time(xp: np.ndarray, kern_fn, s, Fo: int, To: int, c_out: int) -> np.ndarray:
    B = xp.shape[0]
    sf, st = s
    out = np.zeros((B, c_out, Fo, To))
    for b in range(B):
        for to in range(To):
            W, bias = kern_fn(b, to)
            kf, kt = W.shape[2], W.shape[3]
            for fo in range(Fo):
                patch = xp[b, :, fo * sf:fo * sf + kf, to * st:to * st + kt]
                out[b, :, fo, to] = np.einsum("ocij,cij->o", W, patch) + bias
    return out


def dtdy_explicit_oracle(x, layer: DtdyConv2d, phi: np.ndarray | None = None) -> np.ndarray:
    """Reference DTDY output built from the full per-output-bin kernels W(t')."""
    xd = T.as_tensor(x).data
    if phi is None:
        with T.no_grad():
            phi = phi_generator(Tensor(xd), layer).data
    (sf, st), (pf, pt) = layer.stride, layer.padding
    B, C, F, Tn = xd.shape
    k = layer.k
    Fo, To = T.conv_output_size(F, k, sf, pf), T.conv_output_size(Tn, k, st, pt)
    idx = _output_time_index(Tn, To, st)
    W = assembled_kernels(layer, np.asarray(phi)[:, idx])
    xp = np.pad(xd, ((0, 0), (0, 0), (pf, pf), (pt, pt)))
    return _conv_per_time(xp, lambda b, t: (W[b, t], 0.0), (sf, st), Fo, To, layer.c_out)


class TdyConv2d(Module):
    """Temporal dynamic convolution: softmax-weighted mix of K basis kernels."""

    kind = "tdy"

    def __init__(
        self,
        c_in: int,
        c_out: int,
        f_nom: int,
        k: int = 3,
        stride=1,
        padding=1,
        K: int = 6,
        r_a: float = 1 / 8,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.k, self.K = c_in, c_out, k, K
        self.f_nom, self.r_a = f_nom, r_a
        self.stride, self.padding = T._pair(stride), T._pair(padding)
        self.H = H = hidden_dim(c_in, f_nom, r_a)
        fan = c_in * k * k
        self.basis = self.add_param("basis", uniform_fan_in(rng, (K, c_out, c_in, k, k), fan, np.sqrt(2.0)))
        self.biases = self.add_param("biases", np.zeros((K, c_out)))
        self.att1_w = self.add_param("att1_w", uniform_fan_in(rng, (H, c_in + f_nom), c_in + f_nom, np.sqrt(2.0)))
        self.att1_b = self.add_param("att1_b", np.zeros(H))
        self.att2_w = self.add_param("att2_w", np.zeros((K, H)))
        self.att2_b = self.add_param("att2_b", np.zeros(K))

    def forward(self, x: Tensor) -> Tensor:
        return tdy_forward(x, self)


TdyConvParams = TdyConv2d


def tdy_attention(x: Tensor, layer: TdyConv2d) -> Tensor:
    """Per-input-time-bin basis weights, shape (B, T, K); rows sum to one."""
    if x.shape[2] != layer.f_nom:
        raise ValueError(f"tdy layer built for F={layer.f_nom}, got F={x.shape[2]}")
    d = time_descriptor(x)
    hidden = T.relu(T.affine(d, layer.att1_w, layer.att1_b))
    return T.softmax(T.affine(hidden, layer.att2_w, layer.att2_b), axis=-1)


def tdy_forward(x: Tensor, layer: TdyConv2d, attention: Tensor | None = None) -> Tensor:
    """TDY convolution via the K per-basis outputs (exact by linearity).

    ``attention`` overrides the generated (B, T, K) weights.
    """
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != layer.c_in:
        raise ValueError(f"tdy_forward: expected (B, {layer.c_in}, F, T), got {x.shape}")
    K, Co = layer.K, layer.c_out
    stacked = T.reshape(layer.basis, (K * Co, layer.c_in, layer.k, layer.k))
    y = T.conv2d(x, stacked, layer.stride, layer.padding)
    B, _, Fo, To = y.shape
    y = T.add(T.reshape(y, (B, K, Co, Fo, To)), T.reshape(layer.biases, (1, K, Co, 1, 1)))
    if attention is None:
        attention = tdy_attention(x, layer)
    idx = _output_time_index(x.shape[3], To, layer.stride[1])
    pi = T.take(T.as_tensor(attention), idx, axis=1)  # B, T', K
    pi = T.reshape(T.transpose(pi, (0, 2, 1)), (B, K, 1, 1, To))
    return T.sum_(T.mul(y, pi), axes=(1,))


def tdy_explicit_oracle(x, layer: TdyConv2d, attention: np.ndarray | None = None) -> np.ndarray:
    """Reference TDY output with the mixed kernel assembled per output bin."""
    xd = T.as_tensor(x).data
    if attention is None:
        with T.no_grad():
            attention = tdy_attention(Tensor(xd), layer).data
    (sf, st), (pf, pt) = layer.stride, layer.padding
    B, C, F, Tn = xd.shape
    k = layer.k
    Fo, To = T.conv_output_size(F, k, sf, pf), T.conv_output_size(Tn, k, st, pt)
    pi = np.asarray(attention)[:, _output_time_index(Tn, To, st)]
    basis, biases = layer.basis.data, layer.biases.data

    def kern(b, t):
        w = np.einsum("k,kocij->ocij", pi[b, t], basis)
        return w, pi[b, t] @ biases

    xp = np.pad(xd, ((0, 0), (0, 0), (pf, pf), (pt, pt)))
    return _conv_per_time(xp, kern, (sf, st), Fo, To, layer.c_out)


def count_layer_params(layer: Module) -> int:
    """Exact number of trainable scalars in one layer."""
    return layer.count_params()
