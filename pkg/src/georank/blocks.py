"""Pre-LayerNorm transformer pieces shared by the extractor and the matcher.

Parameters live in flat ``name -> array`` dicts; a block reads the entries
under its prefix. Backward closures return ``(input grads..., param grads)``
with param grads keyed by full parameter name.
"""

from __future__ import annotations

from typing import Dict

import numpy as np

from .numerics import LinearParams, attention, gelu, layer_norm, linear

Params = Dict[str, np.ndarray]


def lin(params: Params, prefix: str) -> LinearParams:
    return LinearParams(params[prefix + ".weight"], params.get(prefix + ".bias"))


def init_linear(params: Params, rng, prefix: str, in_dim: int, out_dim: int, zero: bool = False) -> None:
    p = LinearParams.zeros(in_dim, out_dim) if zero else LinearParams.init(rng, in_dim, out_dim)
    params.update(p.arrays(prefix + "."))


def accumulate(grads: Params, prefix: str, g: Params) -> None:
    for k, v in g.items():
        key = f"{prefix}.{k}"
        grads[key] = grads[key] + v if key in grads else v


def init_attention(params: Params, rng, prefix: str, dim: int) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        init_linear(params, rng, f"{prefix}.{name}", dim, dim)


def attention_block(x, context, params: Params, prefix: str, heads: int):
    """``x + Wo·MHA(LN(x)Wq, LN(ctx)Wk, LN(ctx)Wv)``; self-attention when ``context is None``.

    Backward returns ``(dx, dcontext, grads)``; ``dcontext`` is None for self-attention.
    """
    selfattn = context is None
    xn, b_ln = layer_norm(x)
    if selfattn:
        cn, b_lnc = xn, None
    else:
        cn, b_lnc = layer_norm(context)
    q, b_q = linear(xn, lin(params, prefix + ".wq"))
    k, b_k = linear(cn, lin(params, prefix + ".wk"))
    v, b_v = linear(cn, lin(params, prefix + ".wv"))
    a, b_att = attention(q, k, v, heads)
    o, b_o = linear(a, lin(params, prefix + ".wo"))
    out = x + o

    def backward(dout):
        grads: Params = {}
        da, g = b_o(dout)
        accumulate(grads, prefix + ".wo", g)
        dq, dk, dv = b_att(da)
        dxn, g = b_q(dq)
        accumulate(grads, prefix + ".wq", g)
        dcn_k, g = b_k(dk)
        accumulate(grads, prefix + ".wk", g)
        dcn_v, g = b_v(dv)
        accumulate(grads, prefix + ".wv", g)
        dcn = dcn_k + dcn_v
        if selfattn:
            dx = dout + b_ln(dxn + dcn)
            return dx, None, grads
        return dout + b_ln(dxn), b_lnc(dcn), grads

    return out, backward


def init_ffn(params: Params, rng, prefix: str, dim: int, hidden: int) -> None:
    init_linear(params, rng, prefix + ".w1", dim, hidden)
    init_linear(params, rng, prefix + ".w2", hidden, dim)


def ffn(u, params: Params, prefix: str):
    """Position-wise ``GELU(u W1) W2``."""
    h, b1 = linear(u, lin(params, prefix + ".w1"))
    g, bg = gelu(h)
    y, b2 = linear(g, lin(params, prefix + ".w2"))

    def backward(dy):
        grads: Params = {}
        dg, gr = b2(dy)
        accumulate(grads, prefix + ".w2", gr)
        du, gr = b1(bg(dg))
        accumulate(grads, prefix + ".w1", gr)
        return du, grads

    return y, backward


def ffn_block(x, params: Params, prefix: str):
    """Residual ``FFN(LN(x)) + x``."""
    xn, b_ln = layer_norm(x)
    f, b_f = ffn(xn, params, prefix)
    out = f + x

    def backward(dout):
        dxn, grads = b_f(dout)
        return dout + b_ln(dxn), grads

    return out, backward
