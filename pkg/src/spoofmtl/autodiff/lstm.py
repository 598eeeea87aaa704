"""Masked LSTM recurrences with hand-written backpropagation through time."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import ops
from .ops import _sigmoid
from .tensor import Tensor, make_result


def _reverse_index(lengths: np.ndarray, steps: int) -> np.ndarray:
    """Per-item index that reverses the valid prefix and leaves padding in place."""
    t = np.arange(steps)[None, :]
    L = lengths[:, None]
    return np.where(t < L, L - 1 - t, t)


def lstm(x: Tensor, lengths: np.ndarray, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Tensor:
    """Single-direction LSTM over x [B, M, D] -> [B, M, H].

    Gate layout in the stacked weights is (input, forget, cell, output).
    State starts at zero.  Steps at or beyond ``lengths[b]`` output zero and
    receive no gradient; since padding is right-aligned they never influence
    valid steps.
    """
    B, M, D = x.shape
    H = w_hh.shape[1]
    if w_ih.shape != (4 * H, D) or w_hh.shape != (4 * H, H) or bias.shape != (4 * H,):
        raise ValueError(
            f"lstm: weight shapes {w_ih.shape}, {w_hh.shape}, {bias.shape} "
            f"inconsistent with input dim {D} and hidden size {H}"
        )
    xd, wih, whh = x.data, w_ih.data, w_hh.data
    dt = xd.dtype
    valid = (np.arange(M)[None, :] < lengths[:, None]).astype(dt)  # [B, M]

    zx = (xd.reshape(-1, D) @ wih.T + bias.data).reshape(B, M, 4 * H)
    h = np.zeros((B, H), dt)
    c = np.zeros((B, H), dt)
    hs = np.zeros((B, M + 1, H), dt)
    cs = np.zeros((B, M + 1, H), dt)
    gates = np.zeros((B, M, 4 * H), dt)
    tanh_c = np.zeros((B, M, H), dt)
    for t in range(M):
        z = zx[:, t] + h @ whh.T
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)
        tanh_c[:, t] = tc
        hs[:, t + 1] = h
        cs[:, t + 1] = c
    out = hs[:, 1:] * valid[:, :, None]

    def backward(gy):
        gy = gy * valid[:, :, None]
        gz_all = np.zeros((B, M, 4 * H), dt)
        dh_next = np.zeros((B, H), dt)
        dc_next = np.zeros((B, H), dt)
        for t in range(M - 1, -1, -1):
            i, f, g, o = (gates[:, t, k * H:(k + 1) * H] for k in range(4))
            tc = tanh_c[:, t]
            dh = gy[:, t] + dh_next
            dc = dc_next + dh * o * (1 - tc * tc)
            do = dh * tc
            di = dc * g
            dg = dc * i
            df = dc * cs[:, t]
            gz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1
            )
            gz_all[:, t] = gz
            dh_next = gz @ whh
            dc_next = dc * f
        gz2 = gz_all.reshape(-1, 4 * H)
        gx = (gz2 @ wih).reshape(B, M, D) if x.requires_grad else None
        gwih = gz2.T @ xd.reshape(-1, D) if w_ih.requires_grad else None
        gwhh = gz2.T @ hs[:, :-1].reshape(-1, H) if w_hh.requires_grad else None
        gb = gz2.sum(axis=0) if bias.requires_grad else None
        return gx, gwih, gwhh, gb

    return make_result(out, (x, w_ih, w_hh, bias), backward)


def bilstm(x: Tensor, lengths: Optional[Sequence[int]], fwd: Sequence[Tensor],
           bwd: Sequence[Tensor]) -> Tensor:
    """Bidirectional LSTM; ``fwd``/``bwd`` are (w_ih, w_hh, bias) triples.

    Returns [B, M, 2H] with forward outputs first.  The backward direction
    runs over each item's valid prefix in reverse.
    """
    B, M, _ = x.shape
    if M == 0:
        raise ValueError("bilstm: empty sequence (M == 0)")
    lengths = np.full(B, M) if lengths is None else np.asarray(lengths, dtype=int)
    if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > M:
        raise ValueError(f"bilstm: lengths {lengths.tolist()} invalid for {B} items of {M} steps")
    yf = lstm(x, lengths, *fwd)
    rev = _reverse_index(lengths, M)
    rows = np.arange(B)[:, None]
    xr = ops.index(x, (rows, rev))
    yr = lstm(xr, lengths, *bwd)
    yb = ops.index(yr, (rows, rev))
    return ops.concat([yf, yb], axis=-1)
