"""Block-aware mask rebuilding.

For each block: measure the reconstruction error of the initial mask against
the dense block on the same input, back-propagate it once to every effective
weight, score each weight as ``|W| * |dE/dW|`` (original dense ``W``), pair the
best pruned weights with the worst kept ones inside each comparison group, and
swap the top pairs. The number of swaps is ``floor(alpha * #positive pairs)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import kernel as K
from .errors import ConsistencyError, InputError, ShapeError
from .masks import NmPattern, is_nm
from .model import Block, TinyModel, block_forward, block_loss, block_loss_and_grads, embed

GRANULARITIES = ("block", "layer", "input", "output")
COUNT_SCOPES = ("block", "group")
METRICS = ("weight*grad", "weight", "grad")


@dataclass(frozen=True)
class RebuildPair:
    grow: tuple[str, int, int]  # (layer, row, col), currently pruned
    prune: tuple[str, int, int]  # currently kept
    grow_score: float
    prune_score: float
    group: int = 0
    rank: int = 0

    @property
    def value(self) -> float:
        return self.grow_score - self.prune_score


@dataclass(frozen=True)
class BarberConfig:
    alpha: float | Fraction | str = "auto"
    granularity: str = "block"
    nm: NmPattern | None = None
    # "block": alpha is applied to the block's pooled pair list; "group": per comparison group
    count_scope: str = "block"
    # ablation only; the method itself uses |W| * |dE/dW|
    metric: str = "weight*grad"
    report_errors: bool = True

    def __post_init__(self):
        if isinstance(self.alpha, str):
            if self.alpha.lower() != "auto":
                raise InputError(f"alpha must be a number in [0, 1] or 'auto', got {self.alpha!r}")
        elif not 0 <= self.alpha <= 1:
            raise InputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.granularity not in GRANULARITIES:
            raise InputError(f"granularity must be one of {GRANULARITIES}")
        if self.count_scope not in COUNT_SCOPES:
            raise InputError(f"count_scope must be one of {COUNT_SCOPES}")
        if self.metric not in METRICS:
            raise InputError(f"metric must be one of {METRICS}")

    @property
    def auto(self) -> bool:
        return isinstance(self.alpha, str)


@dataclass
class ErrorReport:
    block_id: int
    kind: str
    e_init: float
    e_rebuilt: float
    n_pairs: int
    n_positive: int
    n_applied: int
    alpha: float
    pairs: list[RebuildPair] = field(default_factory=list, repr=False)


# ---------------------------------------------------------------- errors

def layer_error(w, mask, x) -> float:
    """``||W X - (W * M) X||^2``."""
    w, x = K.as_matrix(w, "w"), K.as_matrix(x, "x")
    mask = np.asarray(mask)
    if mask.shape != w.shape or x.shape[0] != w.shape[1]:
        raise ShapeError(f"layer_error: W {w.shape}, M {mask.shape}, X {x.shape}")
    return K.frobenius_sq(K.matmul(w, x) - K.matmul(w * mask.astype(np.float64), x))


def block_error(block: Block, mask, x, lengths=None, target=None) -> float:
    """``||Block(W, X) - Block(W * M, X)||^2``."""
    if target is None:
        target = block_forward(block, None, x, lengths)
    return block_loss(block, mask, x, target, lengths)


def importance_scores(weights: dict, grads: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, w in weights.items():
        g = np.asarray(grads[name])
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, weight {w.shape}")
        out[name] = np.abs(w) * np.abs(g)
    return out


def predicted_delta_e(weights: dict, grads: dict, pair: RebuildPair, t: float = 1.0) -> float:
    """First-order change of E when the grow weight moves 0 -> t*W and the prune weight W -> (1-t)*W."""
    gl, gr, gc = pair.grow
    pl, pr, pc = pair.prune
    return t * (grads[gl][gr, gc] * weights[gl][gr, gc] - grads[pl][pr, pc] * weights[pl][pr, pc])


# ---------------------------------------------------------------- grouping

def group_ids(weights: dict, granularity: str) -> dict[str, np.ndarray]:
    """Integer comparison-group id for every weight entry, numbered in declared layer order."""
    if granularity not in GRANULARITIES:
        raise InputError(f"unknown granularity {granularity!r}")
    out, offset = {}, 0
    for li, (name, w) in enumerate(weights.items()):
        rows, cols = w.shape
        if granularity == "block":
            out[name] = np.zeros((rows, cols), dtype=np.int64)
        elif granularity == "layer":
            out[name] = np.full((rows, cols), li, dtype=np.int64)
        elif granularity == "output":
            out[name] = offset + np.repeat(np.arange(rows), cols).reshape(rows, cols)
            offset += rows
        else:
            out[name] = offset + np.tile(np.arange(cols), rows).reshape(rows, cols)
            offset += cols
    return out


def group_counts(mask: dict, gids: dict) -> np.ndarray:
    """Number of kept entries per comparison group."""
    flat_g = np.concatenate([gids[n].ravel() for n in gids])
    flat_m = np.concatenate([np.asarray(mask[n], dtype=bool).ravel() for n in gids])
    return np.bincount(flat_g, weights=flat_m.astype(np.int64)).astype(np.int64)


def _flatten(scores: dict, mask: dict, gids: dict):
    names = list(scores)
    layer, rows, cols = [], [], []
    for li, name in enumerate(names):
        r, c = scores[name].shape
        layer.append(np.full(r * c, li))
        rows.append(np.repeat(np.arange(r), c))
        cols.append(np.tile(np.arange(c), r))
    s = np.concatenate([scores[n].ravel() for n in names])
    m = np.concatenate([np.asarray(mask[n], dtype=bool).ravel() for n in names])
    g = np.concatenate([gids[n].ravel() for n in names])
    return names, np.concatenate(layer), np.concatenate(rows), np.concatenate(cols), s, m, g


def build_pairs(scores: dict, mask: dict, granularity: str) -> list[list[RebuildPair]]:
    """Pair pruned entries (score descending) with kept entries (score ascending) per group.

    Returns one list per comparison group, in group order; pair values within a
    list are non-increasing by construction. Ties go to the lower row-major index.
    """
    gids = group_ids(scores, granularity)
    names, layer, rows, cols, s, m, g = _flatten(scores, mask, gids)
    n_groups = int(g.max()) + 1 if g.size else 0
    idx = np.arange(s.size)

    grow = idx[~m]
    grow = grow[np.lexsort((grow, -s[grow], g[grow]))]
    prune = idx[m]
    prune = prune[np.lexsort((prune, s[prune], g[prune]))]
    grow_bounds = np.searchsorted(g[grow], np.arange(n_groups + 1))
    prune_bounds = np.searchsorted(g[prune], np.arange(n_groups + 1))

    def pos(i):
        return names[layer[i]], int(rows[i]), int(cols[i])

    out = []
    for gi in range(n_groups):
        gs = grow[grow_bounds[gi]:grow_bounds[gi + 1]]
        ps = prune[prune_bounds[gi]:prune_bounds[gi + 1]]
        out.append([RebuildPair(pos(a), pos(b), float(s[a]), float(s[b]), gi, rank)
                    for rank, (a, b) in enumerate(zip(gs, ps))])
    return out


def nm_pairs(scores: dict, mask: dict, pattern: NmPattern) -> list[list[RebuildPair]]:
    """Candidate swaps that stay inside one M-group, pooled per output row.

    In each M-group the k-th highest-scoring pruned entry is paired with the
    k-th lowest-scoring kept entry, k < min(N, M-N). Each row's candidates are
    sorted by value, descending.
    """
    out = []
    for name, s in scores.items():
        mk = np.asarray(mask[name], dtype=bool)
        if not is_nm(mk, pattern):
            raise InputError(f"layer {name!r} mask is not {pattern} structured")
        rows, cols = s.shape
        sg = s.reshape(rows, cols // pattern.m, pattern.m)
        mg = mk.reshape(sg.shape)
        grow_order = np.argsort(np.where(mg, np.inf, -sg), axis=2, kind="stable")
        prune_order = np.argsort(np.where(mg, sg, np.inf), axis=2, kind="stable")
        k = min(pattern.n, pattern.m - pattern.n)
        for r in range(rows):
            cands = []
            for grp in range(sg.shape[1]):
                base = grp * pattern.m
                for j in range(k):
                    a, b = int(grow_order[r, grp, j]), int(prune_order[r, grp, j])
                    cands.append(((name, r, base + a), (name, r, base + b),
                                  float(sg[r, grp, a]), float(sg[r, grp, b])))
            # stable: equal values keep M-group order
            cands.sort(key=lambda c: -(c[2] - c[3]))
            gid = len(out)
            out.append([RebuildPair(ga, pa, gs, ps, gid, rank)
                        for rank, (ga, pa, gs, ps) in enumerate(cands)])
    return out


# ---------------------------------------------------------------- selection

def rebuild_count(values: Sequence, alpha) -> int:
    """``floor(alpha * #{values > 0})``, clamped to the number of pairs.

    ``values`` may hold pair values or ``RebuildPair`` objects.
    """
    if not 0 <= alpha <= 1:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    values = [v.value if isinstance(v, RebuildPair) else v for v in values]
    positive = sum(1 for v in values if v > 0)
    # tolerance absorbs float products such as 49 * (1/49) = 0.999...
    n = math.floor(positive * alpha + 1e-9)
    return min(n, len(values))


def suggest_alpha(values: Sequence[float]) -> Fraction:
    """Share of positive pair values lying above ``median + 3 * IQR`` of the positive values."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise InputError("suggest_alpha needs at least one pair value")
    pos = values[values > 0]
    if pos.size == 0:
        return Fraction(0)
    q1, med, q3 = np.percentile(pos, [25, 50, 75])
    fence = med + 3.0 * (q3 - q1)
    return Fraction(int(np.count_nonzero(pos > fence)), int(pos.size))


def select_pairs(groups: list[list[RebuildPair]], alpha, count_scope: str = "block") -> list[RebuildPair]:
    if count_scope == "group":
        chosen = []
        for pairs in groups:
            chosen += pairs[:rebuild_count([p.value for p in pairs], alpha)]
        return chosen
    pooled = [p for pairs in groups for p in pairs]
    pooled.sort(key=lambda p: -p.value)  # stable: ties stay in (group, rank) order
    return pooled[:rebuild_count([p.value for p in pooled], alpha)]


def apply_rebuild(mask: dict, pairs: Sequence[RebuildPair], n: int | None = None) -> dict[str, np.ndarray]:
    """Apply the first ``n`` swaps simultaneously; returns a new mask."""
    pairs = list(pairs) if n is None else list(pairs)[:n]
    out = {name: np.array(m, dtype=bool) for name, m in mask.items()}
    touched = set()
    for p in pairs:
        for idx, want in ((p.grow, False), (p.prune, True)):
            if idx in touched:
                raise ConsistencyError(f"weight {idx} appears in more than one pair")
            touched.add(idx)
            name, r, c = idx
            if bool(mask[name][r, c]) != want:
                raise ConsistencyError(f"pair {p} does not match the current mask at {idx}")
        out[p.grow[0]][p.grow[1], p.grow[2]] = True
        out[p.prune[0]][p.prune[1], p.prune[2]] = False
    return out


# ---------------------------------------------------------------- drivers

def _rebuild(block: Block, mask_init: dict, x, config: BarberConfig, lengths, block_id: int, make_pairs):
    target = block_forward(block, None, x, lengths)
    e_init, grads = block_loss_and_grads(block, mask_init, x, target, lengths)
    if config.metric == "weight*grad":
        scores = importance_scores(block.layers, grads)
    elif config.metric == "weight":
        scores = {n: np.abs(w) for n, w in block.layers.items()}
    else:
        scores = {n: np.abs(g) for n, g in grads.items()}
    groups = make_pairs(scores)
    values = [p.value for pairs in groups for p in pairs]
    if config.auto:
        alpha = suggest_alpha(values) if values else Fraction(0)
    else:
        alpha = config.alpha
    chosen = select_pairs(groups, alpha, config.count_scope)
    mask_r = apply_rebuild(mask_init, chosen)
    if not chosen:
        e_rebuilt = e_init
    elif config.report_errors:
        e_rebuilt = block_loss(block, mask_r, x, target, lengths)
    else:
        e_rebuilt = math.nan
    report = ErrorReport(block_id, block.kind, e_init, e_rebuilt, len(values),
                         sum(v > 0 for v in values), len(chosen), float(alpha),
                         [p for pairs in groups for p in pairs])
    return mask_r, report


def barber_block(block: Block, mask_init: dict, x, config: BarberConfig, lengths=None,
                 block_id: int = 0) -> tuple[dict[str, np.ndarray], ErrorReport]:
    """Rebuild one block's mask. Returns the new mask and the E_i / E_r report."""
    if config.nm is not None:
        return nm_rebuild(block, mask_init, x, config, lengths, block_id)
    return _rebuild(block, mask_init, x, config, lengths, block_id,
                    lambda s: build_pairs(s, mask_init, config.granularity))


def nm_rebuild(block: Block, mask_init: dict, x, config: BarberConfig, lengths=None,
               block_id: int = 0) -> tuple[dict[str, np.ndarray], ErrorReport]:
    """Rebuild an N:M mask with swaps confined to single M-groups."""
    if config.nm is None:
        raise InputError("nm_rebuild needs config.nm")
    return _rebuild(block, mask_init, x, config, lengths, block_id,
                    lambda s: nm_pairs(s, mask_init, config.nm))


def barber_model(model: TinyModel, masks_init, sequences, config: BarberConfig):
    """Rebuild every block in order; block b sees the output of blocks < b under their rebuilt masks."""
    if len(masks_init) != len(model.blocks):
        raise ShapeError(f"{len(masks_init)} block masks for {len(model.blocks)} blocks")
    x, lengths = embed(model, sequences)
    masks, reports = [], []
    for b, (block, m) in enumerate(zip(model.blocks, masks_init)):
        m_r, rep = barber_block(block, m, x, config, lengths, block_id=b)
        masks.append(m_r)
        reports.append(rep)
        x = block_forward(block, m_r, x, lengths)
    return masks, reports


def model_block_errors(model: TinyModel, masks, sequences) -> list[float]:
    """Per-block error with sparse propagation (zeros when ``masks`` is None)."""
    x, lengths = embed(model, sequences)
    errs = []
    for b, block in enumerate(model.blocks):
        m = None if masks is None else masks[b]
        if m is None:
            errs.append(0.0)
            continue
        errs.append(block_error(block, m, x, lengths))
        x = block_forward(block, m, x, lengths)
    return errs
