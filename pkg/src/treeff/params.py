"""Walk parameter and gradient containers as flat (name, array) lists.

Declaration order is the contract: optimizers pair params with grads by
position, the checkpoint format writes arrays in exactly this order, and
finite-difference tests sweep it.  Keep the orderings here in sync with
the dataclass field order of each container.
"""

from __future__ import annotations

import numpy as np

from treeff import baselines, fff, lm


def param_arrays(obj, prefix: str = "") -> list:
    """(name, array) pairs for every trainable array under obj."""
    if isinstance(obj, fff.ForestParams):
        return [
            (prefix + "w_in", obj.w_in),
            (prefix + "b_in", obj.b_in),
            (prefix + "w_out", obj.w_out),
            (prefix + "b_out", obj.b_out),
        ]
    if isinstance(obj, baselines.DenseFFParams):
        return [
            (prefix + "w1", obj.w1),
            (prefix + "b1", obj.b1),
            (prefix + "w2", obj.w2),
            (prefix + "b2", obj.b2),
        ]
    if isinstance(obj, baselines.MoEParams):
        out = [(prefix + "w_router", obj.w_router)]
        for i, body in enumerate(obj.bodies):
            out.extend(param_arrays(body, f"{prefix}expert{i}."))
        return out
    if isinstance(obj, lm.AttentionParams):
        return [
            (prefix + "wq", obj.wq),
            (prefix + "wk", obj.wk),
            (prefix + "wv", obj.wv),
            (prefix + "wo", obj.wo),
        ]
    if isinstance(obj, lm.BlockParams):
        out = [(prefix + "ln1_g", obj.ln1_g), (prefix + "ln1_b", obj.ln1_b)]
        out.extend(param_arrays(obj.attn, prefix + "attn."))
        out.extend([(prefix + "ln2_g", obj.ln2_g), (prefix + "ln2_b", obj.ln2_b)])
        out.extend(param_arrays(obj.ff, prefix + "ff."))
        return out
    if isinstance(obj, lm.TinyLMParams):
        out = [(prefix + "tok_emb", obj.tok_emb), (prefix + "pos_emb", obj.pos_emb)]
        for i, blk in enumerate(obj.blocks):
            out.extend(param_arrays(blk, f"{prefix}block{i}."))
        out.extend([(prefix + "lnf_g", obj.lnf_g), (prefix + "lnf_b", obj.lnf_b)])
        if not obj.tied:
            out.append((prefix + "head", obj.head))
        return out
    raise TypeError(f"unknown parameter container {type(obj).__name__}")


def grad_arrays(obj, prefix: str = "") -> list:
    """(name, array) pairs mirroring param_arrays (input grads excluded)."""
    if isinstance(obj, fff.LayerGradients):
        return [
            (prefix + "w_in", obj.g_w_in),
            (prefix + "b_in", obj.g_b_in),
            (prefix + "w_out", obj.g_w_out),
            (prefix + "b_out", obj.g_b_out),
        ]
    if isinstance(obj, baselines.DenseFFGradients):
        return [
            (prefix + "w1", obj.g_w1),
            (prefix + "b1", obj.g_b1),
            (prefix + "w2", obj.g_w2),
            (prefix + "b2", obj.g_b2),
        ]
    if isinstance(obj, baselines.MoEGradients):
        out = [(prefix + "w_router", obj.g_w_router)]
        for i, body in enumerate(obj.g_bodies):
            out.extend(grad_arrays(body, f"{prefix}expert{i}."))
        return out
    if isinstance(obj, lm.AttentionGradients):
        return [
            (prefix + "wq", obj.g_wq),
            (prefix + "wk", obj.g_wk),
            (prefix + "wv", obj.g_wv),
            (prefix + "wo", obj.g_wo),
        ]
    if isinstance(obj, lm.BlockGradients):
        out = [(prefix + "ln1_g", obj.g_ln1_g), (prefix + "ln1_b", obj.g_ln1_b)]
        out.extend(grad_arrays(obj.attn, prefix + "attn."))
        out.extend([(prefix + "ln2_g", obj.g_ln2_g), (prefix + "ln2_b", obj.g_ln2_b)])
        out.extend(grad_arrays(obj.ff, prefix + "ff."))
        return out
    if isinstance(obj, lm.TinyLMGradients):
        out = [(prefix + "tok_emb", obj.g_tok_emb), (prefix + "pos_emb", obj.g_pos_emb)]
        for i, blk in enumerate(obj.blocks):
            out.extend(grad_arrays(blk, f"{prefix}block{i}."))
        out.extend([(prefix + "lnf_g", obj.g_lnf_g), (prefix + "lnf_b", obj.g_lnf_b)])
        if obj.g_head is not None:
            out.append((prefix + "head", obj.g_head))
        return out
    raise TypeError(f"unknown gradient container {type(obj).__name__}")


def pair_params_with_grads(params_obj, grads_obj) -> list:
    """Aligned (name, param, grad) triples, shape-checked."""
    ps = param_arrays(params_obj)
    gs = grad_arrays(grads_obj)
    if len(ps) != len(gs):
        raise ValueError(f"param/grad count mismatch: {len(ps)} vs {len(gs)}")
    out = []
    for (name, p), (gname, g) in zip(ps, gs):
        if name != gname or p.shape != g.shape:
            raise ValueError(f"param/grad misalignment at {name} vs {gname}")
        out.append((name, p, g))
    return out


def total_size(params_obj) -> int:
    return sum(int(np.prod(a.shape)) for _, a in param_arrays(params_obj))
