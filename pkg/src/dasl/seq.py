"""GRU sequence encoder over embedded item histories."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (DimensionError, Tensor, add, add_bias, matmul, mul, record_op,
                       reshape, sigmoid, sub, take_step, tanh, transpose)
from .nn import Module, glorot_uniform


class GruCell(Module):
    """Update gate z, reset gate r, candidate state; weights stored [d_h, d_in].

    The update gate multiplies the *new* candidate:
    ``h_t = (1 - z) * h_prev + z * tanh(W_h x + U_h (r * h_prev) + b_h)``.
    """

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator | None = None):
        def w(shape):
            data = glorot_uniform(rng, shape) if rng is not None else np.zeros(shape)
            return Tensor(data, requires_grad=True)

        self.W_z, self.W_r, self.W_h = w((d_h, d_in)), w((d_h, d_in)), w((d_h, d_in))
        self.U_z, self.U_r, self.U_h = w((d_h, d_h)), w((d_h, d_h)), w((d_h, d_h))
        self.b_z = Tensor(np.zeros(d_h), requires_grad=True)
        self.b_r = Tensor(np.zeros(d_h), requires_grad=True)
        self.b_h = Tensor(np.zeros(d_h), requires_grad=True)

    @property
    def d_in(self) -> int:
        return self.W_z.shape[1]

    @property
    def d_h(self) -> int:
        return self.W_z.shape[0]

    def _step(self, xz: Tensor, xr: Tensor, xh: Tensor, h: Tensor) -> Tensor:
        z = sigmoid(add(xz, matmul(h, transpose(self.U_z))))
        r = sigmoid(add(xr, matmul(h, transpose(self.U_r))))
        cand = tanh(add(xh, matmul(mul(r, h), transpose(self.U_h))))
        return add(sub(h, mul(z, h)), mul(z, cand))


@dataclass
class HiddenState:
    h: Tensor
    t: int
    cold: bool = False


def _as_row(v) -> Tensor:
    v = v if isinstance(v, Tensor) else Tensor(v)
    if v.data.ndim == 1:
        return reshape(v, (1, v.shape[0]))
    return v


def gru_step(cell: GruCell, x_t, h_prev, t: int = 1) -> HiddenState:
    """One recurrence step; accepts vectors or [B, d] batches."""
    x, h = _as_row(x_t), _as_row(h_prev)
    if x.shape[-1] != cell.d_in or h.shape[-1] != cell.d_h or x.shape[0] != h.shape[0]:
        raise DimensionError(f"gru_step: x {x.shape}, h {h.shape} for cell "
                             f"d_in={cell.d_in}, d_h={cell.d_h}")
    xz = add_bias(matmul(x, transpose(cell.W_z)), cell.b_z)
    xr = add_bias(matmul(x, transpose(cell.W_r)), cell.b_r)
    xh = add_bias(matmul(x, transpose(cell.W_h)), cell.b_h)
    return HiddenState(cell._step(xz, xr, xh, h), t)


def encode_sequence(cell: GruCell, items: Sequence, h0=None) -> HiddenState:
    """Fold ``gru_step`` over a time-ordered list of item embeddings.

    An empty sequence returns ``h0`` flagged as a cold user.
    """
    h = _as_row(h0 if h0 is not None else np.zeros(cell.d_h))
    if len(items) == 0:
        return HiddenState(h, 0, cold=True)
    state = HiddenState(h, 0)
    for t, x in enumerate(items, start=1):
        state = gru_step(cell, x, state.h, t)
    return state


def unrolled_encode_batch(cell: GruCell, x: Tensor, mask: np.ndarray,
                          h0: Tensor | None = None) -> Tensor:
    """Final states for a padded batch, built step by step from primitive ops.

    Same contract as :func:`encode_batch`, which fuses the recurrence into a
    single recorded op; this version is kept as its reference.

    ``x`` is [B, T, d_in]; ``mask`` [B, T] marks real positions.  Padded steps
    carry the previous state through unchanged, so a row with no real
    positions ends at ``h0`` (zero by default).
    """
    b, t_len, d_in = x.shape
    if d_in != cell.d_in:
        raise DimensionError(f"encode_batch: input width {d_in} != cell d_in {cell.d_in}")
    mask = np.asarray(mask, dtype=bool)
    h = h0 if h0 is not None else Tensor(np.zeros((b, cell.d_h)))
    active = np.flatnonzero(mask.any(axis=0))
    if active.size == 0:
        return h
    xz = add_bias(matmul(x, transpose(cell.W_z)), cell.b_z)
    xr = add_bias(matmul(x, transpose(cell.W_r)), cell.b_r)
    xh = add_bias(matmul(x, transpose(cell.W_h)), cell.b_h)
    for t in range(active[0], t_len):
        h_new = cell._step(take_step(xz, t), take_step(xr, t), take_step(xh, t), h)
        col = mask[:, t]
        if col.all():
            h = h_new
        else:
            m = Tensor(np.repeat(col[:, None].astype(np.float64), cell.d_h, axis=1))
            h = add(h, mul(m, sub(h_new, h)))
    return h


def _sig(a: np.ndarray) -> np.ndarray:
    return 0.5 + 0.5 * np.tanh(0.5 * a)


def encode_batch(cell: GruCell, x: Tensor, mask: np.ndarray, h0: Tensor | None = None) -> Tensor:
    """Final states for a padded batch, recorded as one ``gru_sequence`` op.

    ``x`` is [B, T, d_in]; ``mask`` [B, T] marks real positions.  Padded steps
    carry the previous state through unchanged, so a row with no real
    positions ends at ``h0`` (zero by default).  The backward pass is
    hand-written backpropagation through time.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    b, t_len, d_in = x.shape
    if d_in != cell.d_in:
        raise DimensionError(f"encode_batch: input width {d_in} != cell d_in {cell.d_in}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (b, t_len):
        raise DimensionError(f"encode_batch: mask {mask.shape} for input {x.shape}")
    h0 = h0 if h0 is not None else Tensor(np.zeros((b, cell.d_h)))
    active = np.flatnonzero(mask.any(axis=0))
    if active.size == 0:
        return h0
    start = int(active[0])
    W_z, W_r, W_h = cell.W_z.data, cell.W_r.data, cell.W_h.data
    U_z, U_r, U_h = cell.U_z.data, cell.U_r.data, cell.U_h.data
    xs = x.data[:, start:]
    ms = mask[:, start:, None].astype(np.float64)
    xz = xs @ W_z.T + cell.b_z.data
    xr = xs @ W_r.T + cell.b_r.data
    xh = xs @ W_h.T + cell.b_h.data
    h = h0.data
    saved = []
    for t in range(xs.shape[1]):
        z = _sig(xz[:, t] + h @ U_z.T)
        r = _sig(xr[:, t] + h @ U_r.T)
        rh = r * h
        c = np.tanh(xh[:, t] + rh @ U_h.T)
        saved.append((h, z, r, rh, c))
        h = h + ms[:, t] * (z * (c - h))

    def backward(g):
        n = len(saved)
        g_xz = np.zeros_like(xz)
        g_xr = np.zeros_like(xr)
        g_xh = np.zeros_like(xh)
        gU_z, gU_r, gU_h = np.zeros_like(U_z), np.zeros_like(U_r), np.zeros_like(U_h)
        gh = g
        for t in range(n - 1, -1, -1):
            h_prev, z, r, rh, c = saved[t]
            m = ms[:, t]
            g_new = gh * m
            g_prev = gh * (1.0 - m) + g_new * (1.0 - z)
            g_ac = g_new * z * (1.0 - c * c)
            g_az = g_new * (c - h_prev) * z * (1.0 - z)
            g_rh = g_ac @ U_h
            g_ar = g_rh * h_prev * r * (1.0 - r)
            g_prev = g_prev + g_rh * r + g_az @ U_z + g_ar @ U_r
            gU_h += g_ac.T @ rh
            gU_z += g_az.T @ h_prev
            gU_r += g_ar.T @ h_prev
            g_xz[:, t], g_xr[:, t], g_xh[:, t] = g_az, g_ar, g_ac
            gh = g_prev
        flat = xs.reshape(-1, d_in)
        gx = np.zeros_like(x.data)
        gx[:, start:] = g_xz @ W_z + g_xr @ W_r + g_xh @ W_h
        grads = [gx]
        for gg in (g_xz, g_xr, g_xh):
            grads.append(gg.reshape(-1, gg.shape[-1]).T @ flat)
        grads += [gU_z, gU_r, gU_h]
        grads += [gg.sum(axis=(0, 1)) for gg in (g_xz, g_xr, g_xh)]
        grads.append(gh)
        return grads

    inputs = (x, cell.W_z, cell.W_r, cell.W_h, cell.U_z, cell.U_r, cell.U_h,
              cell.b_z, cell.b_r, cell.b_h, h0)
    return record_op("gru_sequence", h, inputs, backward)
