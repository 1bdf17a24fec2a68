"""Shared transformer machinery: attention, pre-norm blocks, init helpers."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, concat, gelu, layer_norm, softmax

_NEG_MASK = -1e30  # additive mask value; exp() underflows to exactly 0.0


def init_weight(rng: np.random.Generator, shape, name: str, trainable: bool,
                scale: float | None = None) -> Tensor:
    """Gaussian init; defaults to Xavier so frozen random layers keep unit gain.

    A frozen transformer acts as a fixed feature extractor: small-scale init
    would attenuate everything the trainable adapters feed through it.
    """
    if scale is None:
        fan_in, fan_out = shape[-2] if len(shape) > 1 else shape[-1], shape[-1]
        scale = math.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=trainable, name=name)


def init_zeros(shape, name: str, trainable: bool) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=trainable, name=name)


def init_ones(shape, name: str, trainable: bool) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=trainable, name=name)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(S, D) -> (H, S, D/H)."""
    s, d = x.shape
    return x.reshape(s, n_heads, d // n_heads).transpose(1, 0, 2)


def merge_heads(x: Tensor) -> Tensor:
    """(H, S, dk) -> (S, H*dk)."""
    h, s, dk = x.shape
    return x.transpose(1, 0, 2).reshape(s, h * dk)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int = 1,
                         causal: bool = False, w_out: Tensor | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over already-projected inputs.

    Per head: softmax(q k^T / sqrt(d_k)) v; heads are concatenated and,
    when ``w_out`` is given, linearly mixed. With one head and no mixer
    this is the bare attention equation.
    """
    d = q.shape[-1]
    dk = d // n_heads
    qh = split_heads(q, n_heads)
    kh = split_heads(k, n_heads)
    vh = split_heads(v, n_heads)
    scores = (qh @ kh.transpose(0, 2, 1)) * (1.0 / np.sqrt(dk))
    if causal:
        s_q, s_k = scores.shape[-2], scores.shape[-1]
        mask = np.triu(np.full((s_q, s_k), _NEG_MASK), k=1)
        scores = scores + Tensor(mask)
    ctx = merge_heads(softmax(scores, axis=-1) @ vh)
    return ctx @ w_out if w_out is not None else ctx


class AttentionParams:
    """Query/key/value/output projection matrices for one attention module."""

    def __init__(self, rng, d_model: int, prefix: str, trainable: bool,
                 params: dict[str, Tensor]):
        self.wq = init_weight(rng, (d_model, d_model), f"{prefix}.wq", trainable)
        self.wk = init_weight(rng, (d_model, d_model), f"{prefix}.wk", trainable)
        self.wv = init_weight(rng, (d_model, d_model), f"{prefix}.wv", trainable)
        self.wo = init_weight(rng, (d_model, d_model), f"{prefix}.wo", trainable)
        for t in (self.wq, self.wk, self.wv, self.wo):
            params[t.name] = t

    def __call__(self, x_q: Tensor, x_kv: Tensor, n_heads: int,
                 causal: bool = False) -> Tensor:
        return scaled_dot_attention(x_q @ self.wq, x_kv @ self.wk, x_kv @ self.wv,
                                    n_heads=n_heads, causal=causal, w_out=self.wo)


class FeedForwardParams:
    def __init__(self, rng, d_model: int, prefix: str, trainable: bool,
                 params: dict[str, Tensor], widen: int = 4):
        hidden = widen * d_model
        self.w1 = init_weight(rng, (d_model, hidden), f"{prefix}.w1", trainable)
        self.b1 = init_zeros((hidden,), f"{prefix}.b1", trainable)
        self.w2 = init_weight(rng, (hidden, d_model), f"{prefix}.w2", trainable)
        self.b2 = init_zeros((d_model,), f"{prefix}.b2", trainable)
        for t in (self.w1, self.b1, self.w2, self.b2):
            params[t.name] = t

    def __call__(self, x: Tensor) -> Tensor:
        return gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class LayerNormParams:
    def __init__(self, d_model: int, prefix: str, trainable: bool,
                 params: dict[str, Tensor]):
        self.gain = init_ones((d_model,), f"{prefix}.g", trainable)
        self.bias = init_zeros((d_model,), f"{prefix}.b", trainable)
        params[self.gain.name] = self.gain
        params[self.bias.name] = self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class EncoderBlock:
    """Pre-norm block: self-attention then feed-forward, both residual."""

    def __init__(self, rng, d_model: int, n_heads: int, prefix: str,
                 trainable: bool, params: dict[str, Tensor]):
        self.n_heads = n_heads
        self.ln1 = LayerNormParams(d_model, f"{prefix}.ln1", trainable, params)
        self.attn = AttentionParams(rng, d_model, f"{prefix}.attn", trainable, params)
        self.ln2 = LayerNormParams(d_model, f"{prefix}.ln2", trainable, params)
        self.ffn = FeedForwardParams(rng, d_model, f"{prefix}.ffn", trainable, params)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, self.n_heads)
        x = x + self.ffn(self.ln2(x))
        return x


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    """Classic fixed sin/cos positional encodings, shape (length, d_model)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (dim // 2) / d_model)
    enc = np.empty((length, d_model), dtype=np.float64)
    enc[:, 0::2] = np.sin(angle[:, 0::2])
    enc[:, 1::2] = np.cos(angle[:, 1::2])
    return enc
