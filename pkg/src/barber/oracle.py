"""Independent reference computations for the test and acceptance suites.

Nothing here calls into ``kernel``/``engine``: block forwards are rewritten with
``np.einsum`` (or plain Python loops for the scalar variants) so a bug in the
production path cannot hide behind the same bug in its check.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class FdConfig:
    epsilon: float = 1e-5
    rtol: float = 1e-4
    atol: float = 1e-8

    def __post_init__(self):
        if self.epsilon <= 0 or self.rtol <= 0 or self.atol < 0:
            raise InputError("epsilon and rtol must be positive")


# ---------------------------------------------------------------- scalar loops

def naive_matmul(a, b) -> list[list[float]]:
    a, b = np.asarray(a, dtype=float).tolist(), np.asarray(b, dtype=float).tolist()
    out = []
    for i in range(len(a)):
        row = []
        for j in range(len(b[0])):
            acc = 0.0
            for k in range(len(b)):
                acc += a[i][k] * b[k][j]
            row.append(acc)
        out.append(row)
    return out


def naive_sum_squares(a) -> float:
    acc = 0.0
    for v in np.asarray(a, dtype=float).ravel().tolist():
        acc += v * v
    return acc


def scalar_layer_error(w, mask, x) -> float:
    w, mask, x = (np.asarray(v, dtype=float).tolist() for v in (w, mask, x))
    total = 0.0
    for i in range(len(w)):
        for t in range(len(x[0])):
            d = 0.0
            for j in range(len(x)):
                d += (w[i][j] - w[i][j] * mask[i][j]) * x[j][t]
            total += d * d
    return total


def gauss_jordan_inverse(h) -> list[list[float]]:
    """Explicit elimination with partial pivoting (small matrices only)."""
    n = len(h)
    aug = [list(map(float, row)) + [1.0 if i == j else 0.0 for j in range(n)] for i, row in enumerate(h)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(aug[r][col]))
        if aug[piv][col] == 0.0:
            raise ZeroDivisionError("singular matrix")
        aug[col], aug[piv] = aug[piv], aug[col]
        p = aug[col][col]
        aug[col] = [v / p for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0.0:
                f = aug[r][col]
                aug[r] = [a - f * b for a, b in zip(aug[r], aug[col])]
    return [row[n:] for row in aug]


def obs_scores_bruteforce(w, x, damping: float = 0.01) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    h = naive_matmul(x, x.T)
    mean_diag = sum(h[i][i] for i in range(len(h))) / len(h)
    for i in range(len(h)):
        h[i][i] += damping * mean_diag
    hinv = gauss_jordan_inverse(h)
    return np.array([[w[i, j] ** 2 / hinv[j][j] for j in range(w.shape[1])] for i in range(w.shape[0])])


def _scalar_rmsnorm(row, gain, eps=1e-6):
    ms = sum(v * v for v in row) / len(row)
    r = math.sqrt(ms + eps)
    return [v / r * g for v, g in zip(row, gain)]


def _scalar_act(name, u):
    if name == "silu":
        return u / (1.0 + math.exp(-u))
    return 0.5 * u * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (u + 0.044715 * u ** 3)))


def _scalar_linear(w, vec):
    return [sum(w[i][j] * vec[j] for j in range(len(vec))) for i in range(len(w))]


def scalar_block_forward(block, weights: dict, x) -> np.ndarray:
    """Token-by-token loop implementation for one sequence; ``x`` is ``d x T``."""
    x = np.asarray(x, dtype=float)
    w = {k: np.asarray(v, dtype=float).tolist() for k, v in weights.items()}
    toks = [x[:, t].tolist() for t in range(x.shape[1])]
    if block.kind == "linear":
        return np.array([_scalar_linear(w["w"], t) for t in toks]).T
    gain = block.gain.tolist()
    normed = [_scalar_rmsnorm(t, gain) for t in toks]
    out = []
    if block.kind == "mlp":
        for t, n in zip(toks, normed):
            a = [_scalar_act(block.activation, u) for u in _scalar_linear(w["up"], n)]
            out.append([ti + di for ti, di in zip(t, _scalar_linear(w["down"], a))])
        return np.array(out).T
    d = len(gain)
    dh = d // block.n_heads
    q = [_scalar_linear(w["q"], n) for n in normed]
    k = [_scalar_linear(w["k"], n) for n in normed]
    v = [_scalar_linear(w["v"], n) for n in normed]
    for i, t in enumerate(toks):
        concat = []
        for hd in range(block.n_heads):
            lo, hi = hd * dh, (hd + 1) * dh
            logits = [sum(q[i][c] * k[j][c] for c in range(lo, hi)) / math.sqrt(dh) for j in range(i + 1)]
            mx = max(logits)
            ex = [math.exp(l - mx) for l in logits]
            z = sum(ex)
            concat += [sum(ex[j] / z * v[j][c] for j in range(i + 1)) for c in range(lo, hi)]
        out.append([ti + di for ti, di in zip(t, _scalar_linear(w["o"], concat))])
    return np.array(out).T


# ---------------------------------------------------------------- einsum forward

def _rms(h, gain, eps=1e-6):
    return h / np.sqrt(np.einsum("td,td->t", h, h)[:, None] / h.shape[1] + eps) * gain


def _act(name, u):
    if name == "silu":
        return u / (1.0 + np.exp(-u))
    return 0.5 * u * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (u + 0.044715 * u ** 3)))


def oracle_block_forward(block, weights: dict, x, lengths=None) -> np.ndarray:
    """``Block`` evaluated with explicit effective weights; ``x`` is ``d x T``."""
    h = np.asarray(x, dtype=float).T
    if block.kind == "linear":
        return np.einsum("ij,tj->it", weights["w"], h)
    n = _rms(h, block.gain)
    if block.kind == "mlp":
        a = _act(block.activation, np.einsum("fd,td->tf", weights["up"], n))
        return (h + np.einsum("df,tf->td", weights["down"], a)).T
    T, d = h.shape
    nh = block.n_heads
    dh = d // nh
    q = np.einsum("ed,td->te", weights["q"], n).reshape(T, nh, dh)
    k = np.einsum("ed,td->te", weights["k"], n).reshape(T, nh, dh)
    v = np.einsum("ed,td->te", weights["v"], n).reshape(T, nh, dh)
    concat = np.zeros((T, nh, dh))
    start = 0
    for L in (lengths or [T]):
        sl = slice(start, start + L)
        logits = np.einsum("ihc,jhc->hij", q[sl], k[sl], optimize=False) / np.sqrt(dh)
        logits = np.where(np.tril(np.ones((L, L), dtype=bool))[None], logits, -np.inf)
        p = np.exp(logits - logits.max(axis=2, keepdims=True))
        p /= p.sum(axis=2, keepdims=True)
        concat[sl] = np.einsum("hij,jhc->ihc", p, v[sl])
        start += L
    return (h + np.einsum("ed,td->te", weights["o"], concat.reshape(T, d))).T


def _effective(block, mask) -> dict:
    return {n: w * np.asarray(mask[n], dtype=float) for n, w in block.layers.items()}


def oracle_block_error(block, mask, x, lengths=None) -> float:
    dense = oracle_block_forward(block, block.layers, x, lengths)
    sparse = oracle_block_forward(block, _effective(block, mask), x, lengths)
    diff = dense - sparse
    return float(np.einsum("ij,ij->", diff, diff))


# ---------------------------------------------------------------- oracles

def fd_gradient(block, mask, x, cfg: FdConfig = FdConfig(), lengths=None) -> dict[str, np.ndarray]:
    """Central differences of ``||Block(W,X) - Block(W_eff,X)||^2`` in every entry of ``W_eff``."""
    target = oracle_block_forward(block, block.layers, x, lengths)
    eff = _effective(block, mask)

    def loss(weights):
        diff = target - oracle_block_forward(block, weights, x, lengths)
        return float(np.einsum("ij,ij->", diff, diff))

    grads = {}
    for name, w in eff.items():
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + cfg.epsilon
            up = loss(eff)
            w[idx] = orig - cfg.epsilon
            down = loss(eff)
            w[idx] = orig
            g[idx] = (up - down) / (2 * cfg.epsilon)
        grads[name] = g
    return grads


def gradient_mismatches(analytic: dict, numeric: dict, cfg: FdConfig = FdConfig()) -> list[tuple]:
    """Entries where ``|a - n| > max(rtol * |a|, atol)``."""
    bad = []
    for name, a in analytic.items():
        n = numeric[name]
        tol = np.maximum(cfg.rtol * np.abs(a), cfg.atol)
        for idx in zip(*np.nonzero(np.abs(a - n) > tol)):
            bad.append((name, idx, a[idx], n[idx]))
    return bad


def exhaustive_mask_search(w, x, sparsity) -> tuple[np.ndarray, float]:
    """Best mask with exactly ``floor(sparsity * size)`` zeros under the layer error."""
    w = np.asarray(w, dtype=float)
    if w.size > 16:
        raise InputError("exhaustive search is limited to 16 entries")
    s = sparsity if isinstance(sparsity, Fraction) else Fraction(repr(float(sparsity)))
    n_zero = math.floor(s * w.size)
    best, best_err = None, math.inf
    for zeros in itertools.combinations(range(w.size), n_zero):
        m = np.ones(w.size, dtype=bool)
        m[list(zeros)] = False
        m = m.reshape(w.shape)
        err = scalar_layer_error(w, m, x)
        if err < best_err:
            best, best_err = m, err
    return best, best_err


def true_delta_e(block, mask, x, pair, t: float = 1.0, lengths=None) -> float:
    """Exact ``E(after) - E(before)`` for one swap; ``t < 1`` moves the weights only part way."""
    (gl, gr, gc), (pl, pr, pc) = pair.grow, pair.prune
    if mask[gl][gr, gc] or not mask[pl][pr, pc]:
        raise InputError("pair does not match the mask (grow must be pruned, prune must be kept)")
    after = {n: np.asarray(m, dtype=float).copy() for n, m in mask.items()}
    after[gl][gr, gc] = t
    after[pl][pr, pc] = 1.0 - t
    return oracle_block_error(block, after, x, lengths) - oracle_block_error(block, mask, x, lengths)


def scalar_perplexity(model, masks, sequences) -> float:
    """Cross-entropy by explicit loops on top of the einsum block forward."""
    total, count = 0.0, 0
    for seq in sequences:
        h = model.embedding[list(seq)].T
        for b, block in enumerate(model.blocks):
            w = block.layers if masks is None else _effective(block, masks[b])
            h = oracle_block_forward(block, w, h)
        for t in range(len(seq) - 1):
            row = _scalar_rmsnorm(h[:, t].tolist(), model.final_gain.tolist())
            logits = _scalar_linear(model.head.tolist(), row)
            mx = max(logits)
            lse = mx + math.log(sum(math.exp(l - mx) for l in logits))
            total += lse - logits[seq[t + 1]]
            count += 1
    return math.exp(total / count)
