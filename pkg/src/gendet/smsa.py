"""Masked multi-head attention and the symbiotic multimodal attention block.

Detection tokens query the concatenation ``[z_gen; h_det; h_text]``; running
one masked self-attention layer over the whole unified sequence gives the
same detection rows as :func:`smsa_forward`, while the latent and text rows
evolve under their own mask rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .tensorgrad import Tensor


@dataclass
class MhaParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.n_heads:
            raise tg.ShapeError("MhaParams", (d,), (self.n_heads,))
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (d, d):
                raise tg.ShapeError("MhaParams", self.wq.shape, w.shape)

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class SmsaLayer:
    attn: MhaParams
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, d = x.shape
    x = tg.reshape(x, (*lead, n, h, d // h))
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return tg.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    x = tg.transpose(x, axes)
    return tg.reshape(x, (*lead, n, h * dk))


def multi_head_attention(q_tokens: Tensor, kv_tokens: Tensor, mask: np.ndarray | None,
                         params: MhaParams) -> Tensor:
    """Per head ``softmax(Q K^T / sqrt(d_k)) V`` over admissible columns, then ``W_O``.

    Token arrays are ``(..., n, d_model)``; ``mask`` is ``(n_q, n_kv)`` and is
    shared across leading batch axes.
    """
    d = params.d_model
    if q_tokens.shape[-1] != d or kv_tokens.shape[-1] != d:
        raise tg.ShapeError("multi_head_attention", q_tokens.shape, kv_tokens.shape)
    h = params.n_heads
    q = _split_heads(tg.matmul(q_tokens, params.wq), h)
    k = _split_heads(tg.matmul(kv_tokens, params.wk), h)
    v = _split_heads(tg.matmul(kv_tokens, params.wv), h)
    if mask is not None and mask.shape != (q_tokens.shape[-2], kv_tokens.shape[-2]):
        raise tg.ShapeError("multi_head_attention mask", mask.shape,
                            (q_tokens.shape[-2], kv_tokens.shape[-2]))
    logits = tg.scale(tg.matmul(q, tg.transpose(k)), 1.0 / math.sqrt(params.d_k))
    weights = tg.softmax_rows_masked(logits, mask)
    heads = tg.matmul(weights, v)
    return tg.matmul(_merge_heads(heads), params.wo)


def feed_forward(x: Tensor, layer: SmsaLayer) -> Tensor:
    hidden = tg.gelu(tg.add(tg.matmul(x, layer.ff_w1), layer.ff_b1))
    return tg.add(tg.matmul(hidden, layer.ff_w2), layer.ff_b2)


def layer_forward(x: Tensor, mask: np.ndarray | None, layer: SmsaLayer) -> Tensor:
    """One pre-norm block over a whole unified sequence."""
    xn = tg.layernorm(x, layer.ln1_g, layer.ln1_b)
    x = tg.add(x, multi_head_attention(xn, xn, mask, layer.attn))
    return tg.add(x, feed_forward(tg.layernorm(x, layer.ln2_g, layer.ln2_b), layer))


def smsa_forward(h_det: Tensor, h_text: Tensor | None, z_gen: Tensor | None, layer: SmsaLayer,
                 mask_row_slice: np.ndarray | None) -> Tensor:
    """Next-layer detection features from detection queries over ``[z_gen; h_det; h_text]``.

    ``mask_row_slice`` holds the detection rows of the unified mask, with
    columns in the same concatenation order. Empty or ``None`` segments are
    dropped from the key/value set, as is any segment the mask hides from
    every query.
    """
    segs = [p for p in (z_gen, h_det, h_text) if p is not None and p.shape[-2] > 0]
    if mask_row_slice is not None:
        # drop segments no query may see, so the masked-out path is exactly absent
        parts, cols, start = [], [], 0
        for p in segs:
            stop = start + p.shape[-2]
            if p is h_det or mask_row_slice[:, start:stop].any():
                parts.append(p)
                cols.append(mask_row_slice[:, start:stop])
            start = stop
        if start != mask_row_slice.shape[1]:
            raise tg.ShapeError("smsa_forward mask", mask_row_slice.shape, (h_det.shape[-2], start))
        mask_row_slice = np.concatenate(cols, axis=1)
    else:
        parts = segs
    concat = tg.concat_rows(parts) if len(parts) > 1 else parts[0]
    qn = tg.layernorm(h_det, layer.ln1_g, layer.ln1_b)
    kvn = tg.layernorm(concat, layer.ln1_g, layer.ln1_b)
    x = tg.add(h_det, multi_head_attention(qn, kvn, mask_row_slice, layer.attn))
    return tg.add(x, feed_forward(tg.layernorm(x, layer.ln2_g, layer.ln2_b), layer))
