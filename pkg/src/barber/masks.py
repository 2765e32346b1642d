"""Initial sparsity masks: magnitude, activation-weighted (Wanda-style) and
diagonal-inverse-Hessian (OBS-style) scores, unstructured or N:M.

A block mask is a ``dict`` mapping layer name to a boolean array shaped like
the weight (True = kept). Whenever scores tie, the entry with the lower
row-major index keeps its slot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.linalg

from . import kernel as K
from .errors import InputError, NumericError, ShapeError
from .model import Block, TinyModel, block_forward, embed, layer_inputs

METHODS = ("magnitude", "wanda", "obs")
DEFAULT_DAMPING = 0.01


@dataclass(frozen=True)
class NmPattern:
    n: int
    m: int

    def __post_init__(self):
        if not 1 <= self.n < self.m:
            raise InputError(f"N:M pattern needs 1 <= N < M, got {self.n}:{self.m}")

    @classmethod
    def parse(cls, text: str) -> "NmPattern":
        try:
            n, m = (int(v) for v in text.split(":"))
        except ValueError:
            raise InputError(f"bad N:M pattern {text!r}") from None
        return cls(n, m)

    def __str__(self):
        return f"{self.n}:{self.m}"


def as_fraction(value) -> Fraction:
    """Exact rational for a user-facing fraction; floats go through their shortest repr."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    return Fraction(repr(float(value)))


def prune_count(sparsity, size: int) -> int:
    s = as_fraction(sparsity)
    if not 0 <= s <= 1:
        raise InputError(f"sparsity must lie in [0, 1], got {sparsity}")
    return math.floor(s * size)


def mask_sparsity(mask) -> Fraction:
    """Exact fraction of pruned entries over all layers of one block mask (or a list of them)."""
    if isinstance(mask, dict):
        mask = [mask]
    zeros = total = 0
    for m in mask:
        for arr in m.values():
            arr = np.asarray(arr, dtype=bool)
            zeros += int(arr.size - arr.sum())
            total += arr.size
    return Fraction(zeros, total) if total else Fraction(0)


def _keep_all_but_lowest(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise: False for the ``k`` lowest scores of each row, ties pruning the higher index."""
    rows, cols = scores.shape
    keep = np.ones((rows, cols), dtype=bool)
    if k == 0:
        return keep
    idx = np.broadcast_to(np.arange(cols), (rows, cols))
    order = np.lexsort((-idx, scores), axis=1)
    np.put_along_axis(keep, order[:, :k], False, axis=1)
    return keep


def select_by_score(scores: np.ndarray, sparsity, scope: str = "row") -> np.ndarray:
    """Prune the lowest ``floor(sparsity * group_size)`` scores per group.

    ``scope="layer"`` ranks the whole matrix at once, ``"row"`` each output row.
    """
    scores = K.as_matrix(scores, "scores")
    if scope == "layer":
        flat = scores.reshape(1, -1)
        return _keep_all_but_lowest(flat, prune_count(sparsity, flat.size)).reshape(scores.shape)
    if scope == "row":
        return _keep_all_but_lowest(scores, prune_count(sparsity, scores.shape[1]))
    raise InputError(f"unknown scope {scope!r}")


def magnitude_scores(w: np.ndarray) -> np.ndarray:
    return np.abs(w)


def wanda_scores(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    w, x = K.as_matrix(w, "w"), K.as_matrix(x, "x")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"activations have {x.shape[0]} rows, layer has {w.shape[1]} inputs")
    return np.abs(w) * K.row_l2_norms(x)[None, :]


def obs_scores(w: np.ndarray, x: np.ndarray, damping: float = DEFAULT_DAMPING) -> np.ndarray:
    """``W_ij^2 / [H^-1]_jj`` with ``H = X X^T + damping * mean(diag(X X^T)) * I``."""
    w, x = K.as_matrix(w, "w"), K.as_matrix(x, "x")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"activations have {x.shape[0]} rows, layer has {w.shape[1]} inputs")
    if damping <= 0:
        raise InputError("damping must be positive")
    h = K.matmul(x, x.T)
    h[np.diag_indices_from(h)] += damping * float(np.mean(np.diag(h)))
    try:
        factor = scipy.linalg.cho_factor(h, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"Hessian not positive definite after damping: {exc}") from None
    hinv_diag = np.diag(scipy.linalg.cho_solve(factor, np.eye(h.shape[0])))
    if not np.all(np.isfinite(hinv_diag)) or np.any(hinv_diag <= 0):
        raise NumericError("inverse Hessian diagonal is not positive")
    return w * w / hinv_diag[None, :]


def magnitude_mask(weights: dict, sparsity, scope: str = "layer") -> dict[str, np.ndarray]:
    return {name: select_by_score(magnitude_scores(w), sparsity, scope) for name, w in weights.items()}


def wanda_mask(weights: dict, inputs: dict, sparsity) -> dict[str, np.ndarray]:
    return {name: select_by_score(wanda_scores(w, inputs[name]), sparsity, "row")
            for name, w in weights.items()}


def obs_mask(weights: dict, inputs: dict, sparsity, damping: float = DEFAULT_DAMPING) -> dict[str, np.ndarray]:
    return {name: select_by_score(obs_scores(w, inputs[name], damping), sparsity, "row")
            for name, w in weights.items()}


def to_nm(scores: np.ndarray, pattern: NmPattern) -> np.ndarray:
    """Keep the ``n`` best of every ``m`` consecutive inputs in each row."""
    scores = K.as_matrix(scores, "scores")
    rows, cols = scores.shape
    if cols % pattern.m:
        raise InputError(f"input dimension {cols} not divisible by M={pattern.m}")
    grouped = scores.reshape(rows * cols // pattern.m, pattern.m)
    keep = _keep_all_but_lowest(grouped, pattern.m - pattern.n)
    return keep.reshape(rows, cols)


def is_nm(mask: np.ndarray, pattern: NmPattern) -> bool:
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    if cols % pattern.m:
        return False
    return bool(np.all(mask.reshape(-1, pattern.m).sum(axis=1) == pattern.n))


def layer_scores(method: str, weights: dict, inputs: dict | None, damping=DEFAULT_DAMPING) -> dict:
    if method == "magnitude":
        return {n: magnitude_scores(w) for n, w in weights.items()}
    if inputs is None:
        raise InputError(f"{method} initialization needs calibration activations")
    if method == "wanda":
        return {n: wanda_scores(w, inputs[n]) for n, w in weights.items()}
    if method == "obs":
        return {n: obs_scores(w, inputs[n], damping) for n, w in weights.items()}
    raise InputError(f"unknown init method {method!r}")


def init_block_mask(block: Block, method: str, sparsity=0.5, x=None, lengths=None,
                    nm: NmPattern | None = None, scope: str = "layer",
                    damping: float = DEFAULT_DAMPING) -> dict[str, np.ndarray]:
    """Initial mask for one block. Layer activations are taken from the dense block.

    ``scope`` only affects the magnitude method; activation-aware methods
    always compare within output rows.
    """
    inputs = None if method == "magnitude" else layer_inputs(block, x, lengths)
    scores = layer_scores(method, block.layers, inputs, damping)
    if nm is not None:
        return {n: to_nm(s, nm) for n, s in scores.items()}
    group = scope if method == "magnitude" else "row"
    return {n: select_by_score(s, sparsity, group) for n, s in scores.items()}


def init_model_masks(model: TinyModel, method: str, sparsity=0.5, sequences=None,
                     nm: NmPattern | None = None, scope: str = "layer",
                     damping: float = DEFAULT_DAMPING) -> list[dict[str, np.ndarray]]:
    """Masks for every block. Activations propagate through the already-masked blocks."""
    if method != "magnitude" and sequences is None:
        raise InputError(f"{method} initialization needs calibration sequences")
    masks = []
    if method == "magnitude":
        for block in model.blocks:
            masks.append(init_block_mask(block, method, sparsity, nm=nm, scope=scope))
        return masks
    x, lengths = embed(model, sequences)
    for block in model.blocks:
        m = init_block_mask(block, method, sparsity, x, lengths, nm, scope, damping)
        masks.append(m)
        x = block_forward(block, m, x, lengths)
    return masks
