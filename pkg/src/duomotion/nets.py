"""Shared network building blocks for the denoiser and the joint regressor.

The transformer block is attention-only: self-attention over a person's own
frames plus cross-attention with keys/values from the partner branch, summed
into the residual stream and layer-normalized.  Both branches evaluate the
same weight objects, which is what makes agent swaps exact.  An optional
feed-forward sublayer is available behind config (off by default).
"""

from __future__ import annotations

import numpy as np

from .optim import ParameterStore
from .tensor import Tensor, softmax


def init_linear(store: ParameterStore, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, zero: bool = False):
    if zero:
        w = np.zeros((fan_in, fan_out))
        b = np.zeros(fan_out)
    else:
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        b = np.zeros(fan_out)
    store.add(f"{name}.weight", w)
    store.add(f"{name}.bias", b)


def linear(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    return x @ store[f"{name}.weight"] + store[f"{name}.bias"]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def sinusoidal_embedding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos features; positions (N,) -> (N, dim)."""
    positions = np.atleast_1d(np.asarray(positions, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb


def multihead_attention(q_in: Tensor, kv_in: Tensor, wq: Tensor, wk: Tensor,
                        wv: Tensor, heads: int) -> Tensor:
    """Softmax attention with queries from one stream, keys/values from
    another; scaling is 1/sqrt(per-head channels).  No output projection."""
    B, L, D = q_in.shape
    dh = D // heads
    q = (q_in @ wq).reshape(B, L, heads, dh).swapaxes(1, 2)
    k = (kv_in @ wk).reshape(B, L, heads, dh).swapaxes(1, 2)
    v = (kv_in @ wv).reshape(B, L, heads, dh).swapaxes(1, 2)
    att = softmax(q @ k.swapaxes(-1, -2) * (1.0 / np.sqrt(dh)), axis=-1)
    out = (att @ v).swapaxes(1, 2).reshape(B, L, D)
    return out


def init_attention_block(store: ParameterStore, prefix: str, d_model: int,
                         rng: np.random.Generator, feed_forward: bool = False,
                         ff_mult: int = 2):
    for attn in ("sa", "ca"):
        for mat in ("wq", "wk", "wv"):
            store.add(f"{prefix}.{attn}.{mat}",
                      rng.standard_normal((d_model, d_model)) / np.sqrt(d_model))
    store.add(f"{prefix}.ln.gain", np.ones(d_model))
    store.add(f"{prefix}.ln.bias", np.zeros(d_model))
    if feed_forward:
        init_linear(store, f"{prefix}.ff.in", d_model, ff_mult * d_model, rng)
        init_linear(store, f"{prefix}.ff.out", ff_mult * d_model, d_model, rng)
        store.add(f"{prefix}.ff.ln.gain", np.ones(d_model))
        store.add(f"{prefix}.ff.ln.bias", np.zeros(d_model))


def attention_block(store: ParameterStore, prefix: str, h: Tensor,
                    h_partner: Tensor, heads: int,
                    feed_forward: bool = False) -> Tensor:
    """One two-branch block for a single stream:
    LayerNorm(h + SA(h) + CA(h, partner))."""
    sa = multihead_attention(h, h,
                             store[f"{prefix}.sa.wq"], store[f"{prefix}.sa.wk"],
                             store[f"{prefix}.sa.wv"], heads)
    ca = multihead_attention(h, h_partner,
                             store[f"{prefix}.ca.wq"], store[f"{prefix}.ca.wk"],
                             store[f"{prefix}.ca.wv"], heads)
    out = layer_norm(h + sa + ca,
                     store[f"{prefix}.ln.gain"], store[f"{prefix}.ln.bias"])
    if feed_forward:
        ff = linear(store, f"{prefix}.ff.out",
                    linear(store, f"{prefix}.ff.in", out).relu())
        out = layer_norm(out + ff, store[f"{prefix}.ff.ln.gain"],
                         store[f"{prefix}.ff.ln.bias"])
    return out


def swap_halves(x: Tensor) -> Tensor:
    """Partner view of a stacked-person batch: rows (a..., b...) -> (b..., a...)."""
    n = x.shape[0] // 2
    from .tensor import concat
    return concat([x[n:], x[:n]], axis=0)
