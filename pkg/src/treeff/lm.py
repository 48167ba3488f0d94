"""Minimal GPT-style char model used to exercise feed-forward blocks.

Pre-norm residual blocks, each holding single-head causal self-attention
followed by one feed-forward block.  The ff block is pluggable: dense,
tree-routed, or mixture-of-experts, all sharing the (forward, backward)
pair convention.  Every gradient here is hand-derived; there is no
autodiff anywhere in the package.

Shapes: tokens (B, T) int64 -> logits (B, T, V).  The ff block sees tokens
as a flat (B*T, d_model) batch, so tree routing happens per token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from treeff import baselines, fff
from treeff.numeric import gaussian

LN_EPS = 1e-5


@dataclass
class AttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class AttentionGradients:
    g_wq: np.ndarray
    g_wk: np.ndarray
    g_wv: np.ndarray
    g_wo: np.ndarray


@dataclass
class BlockParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    attn: AttentionParams
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    ff: object  # DenseFFParams | ForestParams | MoEParams


@dataclass
class BlockGradients:
    g_ln1_g: np.ndarray
    g_ln1_b: np.ndarray
    attn: AttentionGradients
    g_ln2_g: np.ndarray
    g_ln2_b: np.ndarray
    ff: object


@dataclass
class TinyLMParams:
    vocab: int
    context: int
    d_model: int
    tied: bool
    tok_emb: np.ndarray  # (V, d)
    pos_emb: np.ndarray  # (context, d)
    blocks: list
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    head: np.ndarray | None  # (d, V) when untied, None when tied


@dataclass
class TinyLMGradients:
    g_tok_emb: np.ndarray
    g_pos_emb: np.ndarray
    blocks: list
    g_lnf_g: np.ndarray
    g_lnf_b: np.ndarray
    g_head: np.ndarray | None


@dataclass
class TinyLMCache:
    tokens: np.ndarray
    block_caches: list
    lnf_cache: tuple
    xf: np.ndarray


def layernorm_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def layernorm_backward(cache, g_y: np.ndarray):
    xhat, inv, g = cache
    d = xhat.shape[-1]
    g_g = (g_y * xhat).reshape(-1, d).sum(axis=0)
    g_b = g_y.reshape(-1, d).sum(axis=0)
    g_xhat = g_y * g
    mean1 = g_xhat.mean(axis=-1, keepdims=True)
    mean2 = (g_xhat * xhat).mean(axis=-1, keepdims=True)
    g_x = inv * (g_xhat - mean1 - xhat * mean2)
    return g_x, g_g, g_b


def init_attention(rng, d_model: int) -> AttentionParams:
    std = d_model**-0.5
    return AttentionParams(
        wq=gaussian(rng, 0.0, std, (d_model, d_model)),
        wk=gaussian(rng, 0.0, std, (d_model, d_model)),
        wv=gaussian(rng, 0.0, std, (d_model, d_model)),
        wo=gaussian(rng, 0.0, std, (d_model, d_model)),
    )


def attention_forward(p: AttentionParams, x: np.ndarray):
    """Single-head causal self-attention; position t sees positions <= t."""
    b, t, d = x.shape
    x2 = x.reshape(b * t, d)
    q = (x2 @ p.wq).reshape(b, t, d)
    k = (x2 @ p.wk).reshape(b, t, d)
    v = (x2 @ p.wv).reshape(b, t, d)
    scale = d**-0.5
    scores = (q @ k.transpose(0, 2, 1)) * scale
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores[:, future] = -np.inf  # exp gives exactly 0 weight
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=-1, keepdims=True)
    ctx = attn @ v
    out = (ctx.reshape(b * t, d) @ p.wo).reshape(b, t, d)
    return out, (x2, q, k, v, attn, ctx)


def attention_backward(p: AttentionParams, cache, g_out: np.ndarray):
    x2, q, k, v, attn, ctx = cache
    b, t, d = g_out.shape
    scale = d**-0.5
    g_out2 = g_out.reshape(b * t, d)
    g_wo = ctx.reshape(b * t, d).T @ g_out2
    g_ctx = (g_out2 @ p.wo.T).reshape(b, t, d)
    g_attn = g_ctx @ v.transpose(0, 2, 1)
    g_v = attn.transpose(0, 2, 1) @ g_ctx
    # softmax rows: masked entries have attn == 0, so their grad is 0 too
    g_scores = attn * (g_attn - (g_attn * attn).sum(axis=-1, keepdims=True))
    g_q = (g_scores @ k) * scale
    g_k = (g_scores.transpose(0, 2, 1) @ q) * scale
    g_wq = x2.T @ g_q.reshape(b * t, d)
    g_wk = x2.T @ g_k.reshape(b * t, d)
    g_wv = x2.T @ g_v.reshape(b * t, d)
    g_x2 = g_q.reshape(b * t, d) @ p.wq.T
    g_x2 += g_k.reshape(b * t, d) @ p.wk.T
    g_x2 += g_v.reshape(b * t, d) @ p.wv.T
    grads = AttentionGradients(g_wq=g_wq, g_wk=g_wk, g_wv=g_wv, g_wo=g_wo)
    return grads, g_x2.reshape(b, t, d)


def block_ff_forward(ff, x2d: np.ndarray, counter=None):
    if isinstance(ff, fff.ForestParams):
        return fff.forward_masked(ff, x2d)
    if isinstance(ff, baselines.DenseFFParams):
        return baselines.dense_forward(ff, x2d, counter=counter)
    if isinstance(ff, baselines.MoEParams):
        return baselines.moe_forward(ff, x2d, counter=counter)
    raise TypeError(f"unknown ff block type {type(ff).__name__}")


def block_ff_backward(ff, cache, g2d: np.ndarray):
    """Returns (grads, g_x) for any block kind."""
    if isinstance(ff, fff.ForestParams):
        grads = fff.backward(ff, cache, g2d)
        return grads, grads.g_x
    if isinstance(ff, baselines.DenseFFParams):
        grads = baselines.dense_backward(ff, cache, g2d)
        return grads, grads.g_x
    if isinstance(ff, baselines.MoEParams):
        grads = baselines.moe_backward(ff, cache, g2d)
        return grads, grads.g_x
    raise TypeError(f"unknown ff block type {type(ff).__name__}")


def init_lm(rng, vocab: int, context: int, d_model: int, n_blocks: int, ff_factory, tied: bool = True) -> TinyLMParams:
    """ff_factory(rng) -> one ff block's params (called once per block)."""
    std = d_model**-0.5
    blocks = []
    for _ in range(n_blocks):
        blocks.append(
            BlockParams(
                ln1_g=np.ones(d_model),
                ln1_b=np.zeros(d_model),
                attn=init_attention(rng, d_model),
                ln2_g=np.ones(d_model),
                ln2_b=np.zeros(d_model),
                ff=ff_factory(rng),
            )
        )
    head = None if tied else gaussian(rng, 0.0, std, (d_model, vocab))
    return TinyLMParams(
        vocab=vocab,
        context=context,
        d_model=d_model,
        tied=tied,
        tok_emb=gaussian(rng, 0.0, std, (vocab, d_model)),
        pos_emb=gaussian(rng, 0.0, std, (context, d_model)),
        blocks=blocks,
        lnf_g=np.ones(d_model),
        lnf_b=np.zeros(d_model),
        head=head,
    )


def lm_forward(params: TinyLMParams, tokens: np.ndarray, counter=None):
    tokens = np.asarray(tokens, dtype=np.int64)
    b, t = tokens.shape
    if t > params.context:
        raise ValueError(f"sequence length {t} exceeds context {params.context}")
    d = params.d_model
    x = params.tok_emb[tokens] + params.pos_emb[:t]
    block_caches = []
    for blk in params.blocks:
        h1, ln1_cache = layernorm_forward(x, blk.ln1_g, blk.ln1_b)
        attn_out, attn_cache = attention_forward(blk.attn, h1)
        x = x + attn_out
        h2, ln2_cache = layernorm_forward(x, blk.ln2_g, blk.ln2_b)
        ff_out, ff_cache = block_ff_forward(blk.ff, h2.reshape(b * t, d), counter=counter)
        x = x + ff_out.reshape(b, t, d)
        block_caches.append((ln1_cache, attn_cache, ln2_cache, ff_cache))
    xf, lnf_cache = layernorm_forward(x, params.lnf_g, params.lnf_b)
    w_head = params.tok_emb.T if params.tied else params.head
    logits = (xf.reshape(b * t, d) @ w_head).reshape(b, t, params.vocab)
    return logits, TinyLMCache(tokens=tokens, block_caches=block_caches, lnf_cache=lnf_cache, xf=xf)


def lm_backward(params: TinyLMParams, cache: TinyLMCache, g_logits: np.ndarray) -> TinyLMGradients:
    b, t, _ = g_logits.shape
    d = params.d_model
    xf2 = cache.xf.reshape(b * t, d)
    gl2 = g_logits.reshape(b * t, params.vocab)
    w_head = params.tok_emb.T if params.tied else params.head
    g_w_head = xf2.T @ gl2  # (d, V)
    g_xf = (gl2 @ w_head.T).reshape(b, t, d)

    g_x, g_lnf_g, g_lnf_b = layernorm_backward(cache.lnf_cache, g_xf)
    block_grads = [None] * len(params.blocks)
    for i in range(len(params.blocks) - 1, -1, -1):
        blk = params.blocks[i]
        ln1_cache, attn_cache, ln2_cache, ff_cache = cache.block_caches[i]
        ff_grads, g_h2_2d = block_ff_backward(blk.ff, ff_cache, g_x.reshape(b * t, d))
        g_mid, g_ln2_g, g_ln2_b = layernorm_backward(ln2_cache, g_h2_2d.reshape(b, t, d))
        g_x = g_x + g_mid
        attn_grads, g_h1 = attention_backward(blk.attn, attn_cache, g_x)
        g_res, g_ln1_g, g_ln1_b = layernorm_backward(ln1_cache, g_h1)
        g_x = g_x + g_res
        block_grads[i] = BlockGradients(
            g_ln1_g=g_ln1_g,
            g_ln1_b=g_ln1_b,
            attn=attn_grads,
            g_ln2_g=g_ln2_g,
            g_ln2_b=g_ln2_b,
            ff=ff_grads,
        )

    g_tok = np.zeros_like(params.tok_emb)
    np.add.at(g_tok, cache.tokens, g_x)
    g_pos = np.zeros_like(params.pos_emb)
    g_pos[:t] = g_x.sum(axis=0)
    g_head = None
    if params.tied:
        g_tok += g_w_head.T
    else:
        g_head = g_w_head
    return TinyLMGradients(
        g_tok_emb=g_tok,
        g_pos_emb=g_pos,
        blocks=block_grads,
        g_lnf_g=g_lnf_g,
        g_lnf_b=g_lnf_b,
        g_head=g_head,
    )


def lm_route_masks(params: TinyLMParams, cache: TinyLMCache):
    """RouteMask per tree-routed block, in block order (empty if none)."""
    masks = []
    for blk, (_, _, _, ff_cache) in zip(params.blocks, cache.block_caches):
        if isinstance(blk.ff, fff.ForestParams):
            masks.append(ff_cache.route)
    return masks
