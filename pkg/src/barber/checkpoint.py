"""Binary formats.

TBKT1 (model checkpoint)::

    b"TBKT1" | version u8 (=1) | header: 6 x u32 LE
        (vocab_size, d_model, d_ff, n_heads, n_block_pairs, activation_id)
    then float64 LE tensors, row-major, no padding, in this order:
        embedding (vocab x d)
        per block pair: attn_gain (d), w_q, w_k, w_v, w_o (d x d),
                        mlp_gain (d), w_up (d_ff x d), w_down (d x d_ff)
        final_gain (d), head (vocab x d)

TBMK1 (per-model sparsity masks)::

    b"TBMK1" | version u8 (=1) | the same 6 x u32 header
    then one byte (0 or 1) per weight entry, row-major, per block pair in
    layer order q, k, v, o, up, down.

activation_id: 0 = silu, 1 = gelu.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, ShapeError
from .model import ATTN_LAYERS, MLP_LAYERS, AttentionBlock, MlpBlock, TinyModel

VERSION = 1
ACTIVATION_IDS = {"silu": 0, "gelu": 1}
_HEADER = struct.Struct("<6I")
_PREFIX = 6  # magic (5) + version (1)
HEADER_FIELDS = ("vocab_size", "d_model", "d_ff", "n_heads", "n_block_pairs", "activation_id")


def model_header(model: TinyModel) -> tuple[int, ...]:
    return (model.vocab_size, model.d_model, model.d_ff, model.n_heads,
            model.n_block_pairs, ACTIVATION_IDS[model.activation])


def _pack_header(magic: bytes, header) -> bytes:
    return magic + bytes([VERSION]) + _HEADER.pack(*header)


def _read_header(data: bytes, magic: bytes) -> dict:
    if len(data) < len(magic) or data[: len(magic)] != magic:
        raise FormatError(f"bad magic, expected {magic!r}", offset=0)
    if len(data) < _PREFIX:
        raise FormatError("truncated before version byte", offset=len(data))
    if data[5] != VERSION:
        raise FormatError(f"unsupported version {data[5]}", offset=5)
    if len(data) < _PREFIX + _HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    values = _HEADER.unpack_from(data, _PREFIX)
    hdr = dict(zip(HEADER_FIELDS, values))
    for i, name in enumerate(HEADER_FIELDS[:5]):
        if hdr[name] == 0:
            raise FormatError(f"header field {name} is 0", offset=_PREFIX + 4 * i)
    if hdr["d_model"] % hdr["n_heads"]:
        raise FormatError("n_heads does not divide d_model", offset=_PREFIX + 12)
    if hdr["activation_id"] not in ACTIVATION_IDS.values():
        raise FormatError(f"unknown activation id {hdr['activation_id']}", offset=_PREFIX + 20)
    return hdr


def _tensor_shapes(hdr: dict):
    v, d, f = hdr["vocab_size"], hdr["d_model"], hdr["d_ff"]
    shapes = [("embedding", (v, d))]
    for p in range(hdr["n_block_pairs"]):
        shapes += [(f"attn{p}.gain", (d,))] + [(f"attn{p}.w_{n}", (d, d)) for n in ATTN_LAYERS]
        shapes += [(f"mlp{p}.gain", (d,)), (f"mlp{p}.w_up", (f, d)), (f"mlp{p}.w_down", (d, f))]
    shapes += [("final_gain", (d,)), ("head", (v, d))]
    return shapes


def save_checkpoint(model: TinyModel) -> bytes:
    parts = [_pack_header(b"TBKT1", model_header(model)), model.embedding.astype("<f8").tobytes()]
    for attn, mlp in zip(model.blocks[0::2], model.blocks[1::2]):
        parts.append(attn.gain.astype("<f8").tobytes())
        for w in attn.layers.values():
            parts.append(w.astype("<f8").tobytes())
        parts.append(mlp.gain.astype("<f8").tobytes())
        for w in mlp.layers.values():
            parts.append(w.astype("<f8").tobytes())
    parts += [model.final_gain.astype("<f8").tobytes(), model.head.astype("<f8").tobytes()]
    return b"".join(parts)


def load_checkpoint(data: bytes) -> TinyModel:
    hdr = _read_header(data, b"TBKT1")
    off = _PREFIX + _HEADER.size
    t = {}
    for name, shape in _tensor_shapes(hdr):
        nbytes = 8 * int(np.prod(shape))
        if off + nbytes > len(data):
            raise FormatError(f"truncated payload in tensor {name}", offset=off)
        t[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes", offset=off)
    act = {v: k for k, v in ACTIVATION_IDS.items()}[hdr["activation_id"]]
    blocks = []
    for p in range(hdr["n_block_pairs"]):
        blocks.append(AttentionBlock(*(t[f"attn{p}.w_{n}"] for n in ATTN_LAYERS), hdr["n_heads"], t[f"attn{p}.gain"]))
        blocks.append(MlpBlock(t[f"mlp{p}.w_up"], t[f"mlp{p}.w_down"], act, t[f"mlp{p}.gain"]))
    return TinyModel(t["embedding"], tuple(blocks), t["final_gain"], t["head"],
                     hdr["n_heads"], act, hdr["d_ff"])


def save_masks(model: TinyModel, masks) -> bytes:
    if len(masks) != len(model.blocks):
        raise ShapeError(f"{len(masks)} block masks for {len(model.blocks)} blocks")
    parts = [_pack_header(b"TBMK1", model_header(model))]
    for block, m in zip(model.blocks, masks):
        for name, w in block.layers.items():
            arr = np.asarray(m[name])
            if arr.shape != w.shape:
                raise ShapeError(f"mask {name} shape {arr.shape} != weight {w.shape}")
            parts.append(arr.astype(bool).astype(np.uint8).tobytes())
    return b"".join(parts)


def read_mask_header(data: bytes) -> tuple[int, ...]:
    hdr = _read_header(data, b"TBMK1")
    return tuple(hdr[f] for f in HEADER_FIELDS)


def load_masks(data: bytes) -> tuple[tuple[int, ...], list[dict[str, np.ndarray]]]:
    """Return ``(header, masks)``; compare the header against ``model_header`` before use."""
    hdr = _read_header(data, b"TBMK1")
    d, f = hdr["d_model"], hdr["d_ff"]
    off = _PREFIX + _HEADER.size
    masks = []
    for _ in range(hdr["n_block_pairs"]):
        for names, shapes in ((ATTN_LAYERS, [(d, d)] * 4), (MLP_LAYERS, [(f, d), (d, f)])):
            m = {}
            for name, shape in zip(names, shapes):
                n = shape[0] * shape[1]
                if off + n > len(data):
                    raise FormatError(f"truncated mask payload in layer {name}", offset=off)
                raw = np.frombuffer(data, dtype=np.uint8, count=n, offset=off)
                bad = np.flatnonzero(raw > 1)
                if bad.size:
                    raise FormatError(f"mask byte {raw[bad[0]]} is not 0/1", offset=off + int(bad[0]))
                m[name] = raw.reshape(shape).astype(bool)
                off += n
            masks.append(m)
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes", offset=off)
    return tuple(hdr[f] for f in HEADER_FIELDS), masks
