"""Binary checkpoints: 4-byte magic, little-endian u32 header, then raw
little-endian float64 parameter arrays in declaration order.

Containers:
  FFF1  tree layer    header: variant, trees, depth, d_in, d_out
  DFF1  dense ff      header: d_in, d_hidden, d_out
  MOE1  mixture       header: experts, top_k, d_in, d_expert, d_out
  TLM1  tiny LM       header: vocab, context, d_model, n_blocks, tied
                      (each block embeds its ff sub-container, magic and all)

Round trips are bitwise: arrays are written with tobytes() and read back
with frombuffer(), no reformatting anywhere.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from treeff import baselines, fff, lm

MAGIC_FOREST = b"FFF1"
MAGIC_DENSE = b"DFF1"
MAGIC_MOE = b"MOE1"
MAGIC_LM = b"TLM1"

VARIANT_CODES = {fff.PRE_GELU: 0, fff.POST_GELU: 1}
VARIANT_NAMES = {code: name for name, code in VARIANT_CODES.items()}


def _write_u32(fh, *values) -> None:
    fh.write(struct.pack("<" + "I" * len(values), *values))


def _read_u32(fh, count: int):
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError("truncated checkpoint header")
    return struct.unpack("<" + "I" * count, raw)


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fh, shape) -> np.ndarray:
    count = int(np.prod(shape))
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError("truncated checkpoint payload")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def write_forest(fh, params: fff.ForestParams) -> None:
    fh.write(MAGIC_FOREST)
    _write_u32(fh, VARIANT_CODES[params.variant], params.trees, params.depth, params.d_in, params.d_out)
    for arr in (params.w_in, params.b_in, params.w_out, params.b_out):
        _write_array(fh, arr)


def read_forest(fh) -> fff.ForestParams:
    """Body reader: the 4-byte magic must already be consumed (see read_block)."""
    variant_code, trees, depth, d_in, d_out = _read_u32(fh, 5)
    if variant_code not in VARIANT_NAMES:
        hint = ""
        if struct.pack("<I", variant_code) in (MAGIC_FOREST, MAGIC_DENSE, MAGIC_MOE, MAGIC_LM):
            hint = "; the stream still starts with its container magic, use read_block"
        raise ValueError(f"unknown variant code {variant_code}{hint}")
    n = fff.num_nodes(depth)
    return fff.ForestParams(
        trees=trees,
        depth=depth,
        d_in=d_in,
        d_out=d_out,
        variant=VARIANT_NAMES[variant_code],
        w_in=_read_array(fh, (trees, n, d_in)),
        b_in=_read_array(fh, (trees, n)),
        w_out=_read_array(fh, (trees, n, d_out)),
        b_out=_read_array(fh, (d_out,)),
    )


def write_dense(fh, params: baselines.DenseFFParams) -> None:
    fh.write(MAGIC_DENSE)
    _write_u32(fh, params.d_in, params.d_hidden, params.d_out)
    for arr in (params.w1, params.b1, params.w2, params.b2):
        _write_array(fh, arr)


def read_dense(fh) -> baselines.DenseFFParams:
    """Body reader: the 4-byte magic must already be consumed (see read_block)."""
    d_in, d_hidden, d_out = _read_u32(fh, 3)
    return baselines.DenseFFParams(
        d_in=d_in,
        d_hidden=d_hidden,
        d_out=d_out,
        w1=_read_array(fh, (d_in, d_hidden)),
        b1=_read_array(fh, (d_hidden,)),
        w2=_read_array(fh, (d_hidden, d_out)),
        b2=_read_array(fh, (d_out,)),
    )


def write_moe(fh, params: baselines.MoEParams) -> None:
    fh.write(MAGIC_MOE)
    _write_u32(fh, params.experts, params.top_k, params.d_in, params.d_expert, params.d_out)
    _write_array(fh, params.w_router)
    for body in params.bodies:
        for arr in (body.w1, body.b1, body.w2, body.b2):
            _write_array(fh, arr)


def read_moe(fh) -> baselines.MoEParams:
    """Body reader: the 4-byte magic must already be consumed (see read_block)."""
    experts, top_k, d_in, d_expert, d_out = _read_u32(fh, 5)
    w_router = _read_array(fh, (d_in, experts))
    bodies = []
    for _ in range(experts):
        bodies.append(
            baselines.DenseFFParams(
                d_in=d_in,
                d_hidden=d_expert,
                d_out=d_out,
                w1=_read_array(fh, (d_in, d_expert)),
                b1=_read_array(fh, (d_expert,)),
                w2=_read_array(fh, (d_expert, d_out)),
                b2=_read_array(fh, (d_out,)),
            )
        )
    return baselines.MoEParams(
        experts=experts, top_k=top_k, d_in=d_in, d_expert=d_expert, d_out=d_out,
        w_router=w_router, bodies=bodies,
    )


_BLOCK_WRITERS = [
    (fff.ForestParams, write_forest),
    (baselines.DenseFFParams, write_dense),
    (baselines.MoEParams, write_moe),
]

_BLOCK_READERS = {
    MAGIC_FOREST: read_forest,
    MAGIC_DENSE: read_dense,
    MAGIC_MOE: read_moe,
}


def write_block(fh, block) -> None:
    for kind, writer in _BLOCK_WRITERS:
        if isinstance(block, kind):
            writer(fh, block)
            return
    raise TypeError(f"cannot serialize block of type {type(block).__name__}")


def read_block(fh):
    magic = fh.read(4)
    if magic not in _BLOCK_READERS:
        raise ValueError(f"checkpoint-version mismatch: unknown magic {magic!r}")
    return _BLOCK_READERS[magic](fh)


def write_lm(fh, params: lm.TinyLMParams) -> None:
    fh.write(MAGIC_LM)
    _write_u32(fh, params.vocab, params.context, params.d_model, len(params.blocks), int(params.tied))
    _write_array(fh, params.tok_emb)
    _write_array(fh, params.pos_emb)
    for blk in params.blocks:
        for arr in (blk.ln1_g, blk.ln1_b, blk.attn.wq, blk.attn.wk, blk.attn.wv, blk.attn.wo, blk.ln2_g, blk.ln2_b):
            _write_array(fh, arr)
        write_block(fh, blk.ff)
    _write_array(fh, params.lnf_g)
    _write_array(fh, params.lnf_b)
    if not params.tied:
        _write_array(fh, params.head)


def read_lm(fh) -> lm.TinyLMParams:
    """Body reader: the 4-byte magic must already be consumed (see read_checkpoint)."""
    vocab, context, d_model, n_blocks, tied = _read_u32(fh, 5)
    tok_emb = _read_array(fh, (vocab, d_model))
    pos_emb = _read_array(fh, (context, d_model))
    blocks = []
    for _ in range(n_blocks):
        ln1_g = _read_array(fh, (d_model,))
        ln1_b = _read_array(fh, (d_model,))
        attn = lm.AttentionParams(
            wq=_read_array(fh, (d_model, d_model)),
            wk=_read_array(fh, (d_model, d_model)),
            wv=_read_array(fh, (d_model, d_model)),
            wo=_read_array(fh, (d_model, d_model)),
        )
        ln2_g = _read_array(fh, (d_model,))
        ln2_b = _read_array(fh, (d_model,))
        ff = read_block(fh)
        blocks.append(lm.BlockParams(ln1_g=ln1_g, ln1_b=ln1_b, attn=attn, ln2_g=ln2_g, ln2_b=ln2_b, ff=ff))
    lnf_g = _read_array(fh, (d_model,))
    lnf_b = _read_array(fh, (d_model,))
    head = None if tied else _read_array(fh, (d_model, vocab))
    return lm.TinyLMParams(
        vocab=vocab, context=context, d_model=d_model, tied=bool(tied),
        tok_emb=tok_emb, pos_emb=pos_emb, blocks=blocks,
        lnf_g=lnf_g, lnf_b=lnf_b, head=head,
    )


def write_checkpoint(path, model) -> None:
    buf = io.BytesIO()
    if isinstance(model, lm.TinyLMParams):
        write_lm(buf, model)
    else:
        write_block(buf, model)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic == MAGIC_LM:
            model = read_lm(fh)
        elif magic in _BLOCK_READERS:
            model = _BLOCK_READERS[magic](fh)
        else:
            raise ValueError(f"checkpoint-version mismatch: unknown magic {magic!r}")
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return model
