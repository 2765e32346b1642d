"""Tiny pre-norm transformer with manual backprop through a single block.

Public block functions take activations in feature-major layout (``d_model x T``,
tokens as columns). Internally everything runs token-major (``T x d``) so
softmax and normalization act on rows.

Calibration batches hold several sequences side by side; ``lengths`` lists the
column count of each one. Attention is causal within a sequence and never
crosses a boundary. ``lengths=None`` means a single sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import kernel as K
from .errors import InputError, ShapeError

ATTN_LAYERS = ("q", "k", "v", "o")
MLP_LAYERS = ("up", "down")


@dataclass(frozen=True, eq=False)
class AttentionBlock:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    n_heads: int
    gain: np.ndarray
    kind = "attention"

    def __post_init__(self):
        d = self.wq.shape[0]
        for name, w in zip(ATTN_LAYERS, (self.wq, self.wk, self.wv, self.wo)):
            if w.shape != (d, d):
                raise ShapeError(f"attention w_{name} must be {d}x{d}, got {w.shape}")
        if self.n_heads < 1 or d % self.n_heads:
            raise ShapeError(f"n_heads={self.n_heads} must divide d_model={d}")
        if self.gain.shape != (d,):
            raise ShapeError("attention norm gain must have length d_model")

    @property
    def d_in(self) -> int:
        return self.wq.shape[1]

    @property
    def layers(self) -> dict[str, np.ndarray]:
        return {"q": self.wq, "k": self.wk, "v": self.wv, "o": self.wo}


@dataclass(frozen=True, eq=False)
class MlpBlock:
    w_up: np.ndarray
    w_down: np.ndarray
    activation: str
    gain: np.ndarray
    kind = "mlp"

    def __post_init__(self):
        d_ff, d = self.w_up.shape
        if self.w_down.shape != (d, d_ff):
            raise ShapeError(f"w_down must be {d}x{d_ff}, got {self.w_down.shape}")
        if self.activation not in K.ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.gain.shape != (d,):
            raise ShapeError("mlp norm gain must have length d_model")

    @property
    def d_in(self) -> int:
        return self.w_up.shape[1]

    @property
    def layers(self) -> dict[str, np.ndarray]:
        return {"up": self.w_up, "down": self.w_down}


@dataclass(frozen=True, eq=False)
class LinearBlock:
    """A bare linear layer ``Y = W X`` treated as a block (no norm, no residual)."""

    w: np.ndarray
    kind = "linear"

    @property
    def d_in(self) -> int:
        return self.w.shape[1]

    @property
    def layers(self) -> dict[str, np.ndarray]:
        return {"w": self.w}


Block = AttentionBlock | MlpBlock | LinearBlock
BlockMask = Mapping[str, np.ndarray]


def effective_weights(block: Block, mask: BlockMask | None) -> dict[str, np.ndarray]:
    """``W * M`` per layer. Masks may be boolean or real-valued multipliers."""
    layers = block.layers
    if mask is None:
        return dict(layers)
    if set(mask) != set(layers):
        raise ShapeError(f"mask layers {sorted(mask)} != block layers {sorted(layers)}")
    out = {}
    for name, w in layers.items():
        m = np.asarray(mask[name])
        if m.shape != w.shape:
            raise ShapeError(f"mask for {name!r} has shape {m.shape}, weight {w.shape}")
        out[name] = w * m.astype(np.float64)
    return out


def _segments(n_tokens: int, lengths: Sequence[int] | None) -> list[tuple[int, int]]:
    if lengths is None:
        return [(0, n_tokens)]
    if sum(lengths) != n_tokens or any(n < 1 for n in lengths):
        raise ShapeError(f"sequence lengths {list(lengths)} do not tile {n_tokens} tokens")
    bounds, start = [], 0
    for n in lengths:
        bounds.append((start, start + n))
        start += n
    return bounds


def _check_input(block: Block, x) -> np.ndarray:
    x = K.as_matrix(x, "x")
    if x.shape[0] != block.d_in:
        raise ShapeError(f"input has {x.shape[0]} rows, block expects {block.d_in}")
    return x


# ---------------------------------------------------------------- forward

def _attention_forward(block: AttentionBlock, w: dict, h: np.ndarray, lengths):
    T, d = h.shape
    dh = d // block.n_heads
    scale = 1.0 / math.sqrt(dh)
    n = K.rmsnorm_rows(h, block.gain)
    q = K.matmul(n, w["q"].T)
    k = K.matmul(n, w["k"].T)
    v = K.matmul(n, w["v"].T)
    o = np.zeros((T, d))
    probs = {}
    for s, e in _segments(T, lengths):
        causal = np.triu(np.ones((e - s, e - s), dtype=bool), k=1)
        for hd in range(block.n_heads):
            cols = slice(hd * dh, (hd + 1) * dh)
            scores = K.matmul(q[s:e, cols], k[s:e, cols].T) * scale
            scores[causal] = -np.inf
            p = K.softmax_rows(scores)
            probs[s, hd] = p
            o[s:e, cols] = K.matmul(p, v[s:e, cols])
    out = h + K.matmul(o, w["o"].T)
    return out, dict(n=n, q=q, k=k, v=v, o=o, probs=probs, scale=scale, dh=dh)


def _mlp_forward(block: MlpBlock, w: dict, h: np.ndarray):
    act, _ = K.ACTIVATIONS[block.activation]
    n = K.rmsnorm_rows(h, block.gain)
    u = K.matmul(n, w["up"].T)
    a = act(u)
    out = h + K.matmul(a, w["down"].T)
    return out, dict(n=n, u=u, a=a)


def _forward(block: Block, w: dict, h: np.ndarray, lengths):
    if block.kind == "attention":
        return _attention_forward(block, w, h, lengths)
    if block.kind == "mlp":
        return _mlp_forward(block, w, h)
    return K.matmul(h, w["w"].T), {}


def block_forward(block: Block, mask: BlockMask | None, x, lengths=None) -> np.ndarray:
    """``Block(W * M, X)`` with ``X`` of shape ``d_in x T``; returns ``d_out x T``."""
    x = _check_input(block, x)
    w = effective_weights(block, mask)
    out, _ = _forward(block, w, np.ascontiguousarray(x.T), lengths)
    return np.ascontiguousarray(out.T)


def layer_inputs(block: Block, x, lengths=None, mask: BlockMask | None = None) -> dict[str, np.ndarray]:
    """Input activation (``C_in x T``) seen by every linear layer of the block."""
    x = _check_input(block, x)
    w = effective_weights(block, mask)
    _, c = _forward(block, w, np.ascontiguousarray(x.T), lengths)
    if block.kind == "attention":
        nT = c["n"].T
        return {"q": nT, "k": nT, "v": nT, "o": c["o"].T}
    if block.kind == "mlp":
        return {"up": c["n"].T, "down": c["a"].T}
    return {"w": x}


# ---------------------------------------------------------------- backward

def _attention_backward(block: AttentionBlock, w: dict, c: dict, dout: np.ndarray, lengths):
    T, d = dout.shape
    dh, scale = c["dh"], c["scale"]
    grads = {"o": K.matmul(dout.T, c["o"])}
    do = K.matmul(dout, w["o"])
    dq, dk, dv = np.zeros((T, d)), np.zeros((T, d)), np.zeros((T, d))
    for s, e in _segments(T, lengths):
        for hd in range(block.n_heads):
            cols = slice(hd * dh, (hd + 1) * dh)
            p = c["probs"][s, hd]
            doh = do[s:e, cols]
            dp = K.matmul(doh, c["v"][s:e, cols].T)
            dv[s:e, cols] = K.matmul(p.T, doh)
            ds = p * (dp - K.seq_sum(dp * p, axis=1)[:, None]) * scale
            dq[s:e, cols] = K.matmul(ds, c["k"][s:e, cols])
            dk[s:e, cols] = K.matmul(ds.T, c["q"][s:e, cols])
    grads["q"] = K.matmul(dq.T, c["n"])
    grads["k"] = K.matmul(dk.T, c["n"])
    grads["v"] = K.matmul(dv.T, c["n"])
    return grads


def _mlp_backward(block: MlpBlock, w: dict, c: dict, dout: np.ndarray):
    _, act_grad = K.ACTIVATIONS[block.activation]
    da = K.matmul(dout, w["down"])
    du = da * act_grad(c["u"])
    return {"up": K.matmul(du.T, c["n"]), "down": K.matmul(dout.T, c["a"])}


def _residual(block: Block, mask, x, target, lengths):
    x = _check_input(block, x)
    target = K.as_matrix(target, "target")
    w = effective_weights(block, mask)
    h = np.ascontiguousarray(x.T)
    out, cache = _forward(block, w, h, lengths)
    if target.shape != out.T.shape:
        raise ShapeError(f"target shape {target.shape} != block output {out.T.shape}")
    return out - target.T, w, h, cache


def block_loss(block: Block, mask: BlockMask | None, x, target, lengths=None) -> float:
    """``||target - Block(W*M, X)||^2``."""
    return K.frobenius_sq(_residual(block, mask, x, target, lengths)[0])


def block_loss_and_grads(block: Block, mask: BlockMask | None, x, target, lengths=None):
    """Return ``(E, grads)`` where ``E = ||target - Block(W*M, X)||^2``.

    Gradients are taken with respect to the effective weights ``W*M`` as free
    variables, so pruned entries get a meaningful (generally nonzero) gradient.
    """
    resid, w, h, cache = _residual(block, mask, x, target, lengths)
    loss = K.frobenius_sq(resid)
    dout = 2.0 * resid
    if block.kind == "attention":
        grads = _attention_backward(block, w, cache, dout, lengths)
    elif block.kind == "mlp":
        grads = _mlp_backward(block, w, cache, dout)
    else:
        grads = {"w": K.matmul(dout.T, h)}
    return loss, {name: grads[name] for name in block.layers}


def block_backward(block: Block, mask: BlockMask | None, x, target, lengths=None) -> dict[str, np.ndarray]:
    return block_loss_and_grads(block, mask, x, target, lengths)[1]


# ---------------------------------------------------------------- model

@dataclass(frozen=True, eq=False)
class TinyModel:
    embedding: np.ndarray  # vocab x d_model
    blocks: tuple  # Attention, MLP, Attention, MLP, ...
    final_gain: np.ndarray
    head: np.ndarray  # vocab x d_model
    n_heads: int
    activation: str
    d_ff: int

    def __post_init__(self):
        v, d = self.embedding.shape
        if v < 1 or d < 1:
            raise ShapeError("vocab_size and d_model must be positive")
        if self.head.shape != (v, d) or self.final_gain.shape != (d,):
            raise ShapeError("head / final norm inconsistent with embedding")
        if len(self.blocks) % 2:
            raise ShapeError("blocks must come in attention/MLP pairs")
        for i, b in enumerate(self.blocks):
            want = "attention" if i % 2 == 0 else "mlp"
            if b.kind != want:
                raise ShapeError(f"block {i} is {b.kind}, expected {want}")
            if b.d_in != d:
                raise ShapeError(f"block {i} width {b.d_in} != d_model {d}")
            if b.kind == "attention" and b.n_heads != self.n_heads:
                raise ShapeError(f"block {i} has {b.n_heads} heads, model says {self.n_heads}")
            if b.kind == "mlp" and (b.w_up.shape[0] != self.d_ff or b.activation != self.activation):
                raise ShapeError(f"block {i} MLP inconsistent with model header")

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def d_model(self) -> int:
        return self.embedding.shape[1]

    @property
    def n_block_pairs(self) -> int:
        return len(self.blocks) // 2


def build_model(seed: int, vocab_size: int = 32, d_model: int = 16, d_ff: int = 32,
                n_heads: int = 2, n_block_pairs: int = 2, activation: str = "silu") -> TinyModel:
    """Random model, deterministic in ``seed``.

    Norm gains are log-normal so per-channel activation scales differ, as in
    real LLMs; otherwise activation-aware pruning scores collapse to magnitude.
    """
    if min(vocab_size, d_model, d_ff, n_heads, n_block_pairs) < 1:
        raise InputError("all model dimensions must be positive")
    if d_model % n_heads:
        raise InputError(f"n_heads={n_heads} must divide d_model={d_model}")
    if activation not in K.ACTIVATIONS:
        raise InputError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)

    def lin(rows, cols):
        return rng.standard_normal((rows, cols)) / math.sqrt(cols)

    def gain():
        return np.exp(0.5 * rng.standard_normal(d_model))

    embedding = rng.standard_normal((vocab_size, d_model))
    blocks = []
    for _ in range(n_block_pairs):
        blocks.append(AttentionBlock(lin(d_model, d_model), lin(d_model, d_model),
                                     lin(d_model, d_model), lin(d_model, d_model), n_heads, gain()))
        blocks.append(MlpBlock(lin(d_ff, d_model), lin(d_model, d_ff), activation, gain()))
    return TinyModel(embedding, tuple(blocks), gain(), lin(vocab_size, d_model),
                     n_heads, activation, d_ff)


def _check_tokens(model: TinyModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise InputError("a token sequence must be a non-empty 1-D list of ids")
    bad = np.flatnonzero((tokens < 0) | (tokens >= model.vocab_size))
    if bad.size:
        raise InputError(f"token id {tokens[bad[0]]} at position {bad[0]} outside vocab {model.vocab_size}")
    return tokens


def embed(model: TinyModel, sequences) -> tuple[np.ndarray, tuple[int, ...]]:
    """Embed sequences side by side: returns ``(X, lengths)`` with ``X`` of shape ``d_model x T``."""
    seqs = [_check_tokens(model, s) for s in sequences]
    if not seqs:
        raise InputError("no sequences")
    ids = np.concatenate(seqs)
    return np.ascontiguousarray(model.embedding[ids].T), tuple(len(s) for s in seqs)


def _masks_for(model: TinyModel, masks):
    if masks is None:
        return [None] * len(model.blocks)
    if len(masks) != len(model.blocks):
        raise ShapeError(f"{len(masks)} block masks for {len(model.blocks)} blocks")
    return list(masks)


def hidden_states(model: TinyModel, sequences, masks=None) -> tuple[np.ndarray, tuple[int, ...]]:
    x, lengths = embed(model, sequences)
    for block, m in zip(model.blocks, _masks_for(model, masks)):
        x = block_forward(block, m, x, lengths)
    return x, lengths


def logits_from_hidden(model: TinyModel, x: np.ndarray) -> np.ndarray:
    n = K.rmsnorm_rows(np.ascontiguousarray(x.T), model.final_gain)
    return K.matmul(n, model.head.T)


def model_forward(model: TinyModel, tokens, masks=None) -> np.ndarray:
    """Logits for one sequence, shape ``L x vocab`` (row t scores token t+1)."""
    x, _ = hidden_states(model, [tokens], masks)
    return logits_from_hidden(model, x)


def log_softmax_rows(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=1, keepdims=True)
    return shifted - np.log(K.seq_sum(np.exp(shifted), axis=1))[:, None]


def perplexity(model: TinyModel, masks, sequences) -> float:
    """exp of the mean next-token cross-entropy over every predicted position."""
    sequences = list(sequences)
    if not sequences:
        raise InputError("empty corpus")
    for s in sequences:
        if len(s) < 2:
            raise InputError("perplexity needs sequences of length >= 2")
    x, lengths = hidden_states(model, sequences, masks)
    logp = log_softmax_rows(logits_from_hidden(model, x))
    nll, start = [], 0
    for seq, n in zip(sequences, lengths):
        rows = np.arange(start, start + n - 1)
        nll.append(-logp[rows, np.asarray(seq[1:], dtype=np.int64)])
        start += n
    nll = np.concatenate(nll)
    return math.exp(K.seq_sum(nll) / nll.size)
