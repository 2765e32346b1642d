"""Seeded experiment grids: the error-improvement suite and the calibration-size sweep."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

from .calib import gen_synthetic
from .engine import GRANULARITIES, BarberConfig, barber_model, model_block_errors
from .masks import METHODS, init_model_masks
from .model import build_model

SUITE_MODEL = dict(vocab_size=32, d_model=16, d_ff=32, n_heads=2, n_block_pairs=1)
SUITE_SPARSITIES = (0.5, 0.6)
SUITE_SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class SuiteConfig:
    seed: int
    method: str
    granularity: str
    sparsity: float


@dataclass(frozen=True)
class SuiteResult:
    config: SuiteConfig
    e_init: float  # summed over blocks
    e_rebuilt: float
    n_applied: int

    @property
    def improved(self) -> bool:
        return self.e_rebuilt < self.e_init

    @property
    def relative_reduction(self) -> float:
        return (self.e_init - self.e_rebuilt) / self.e_init


def suite_configs(seeds=SUITE_SEEDS) -> list[SuiteConfig]:
    return [SuiteConfig(*c) for c in itertools.product(seeds, METHODS, GRANULARITIES, SUITE_SPARSITIES)]


def run_config(cfg: SuiteConfig, alpha="auto", n_samples: int = 4, length: int = 16) -> SuiteResult:
    model = build_model(cfg.seed, **SUITE_MODEL)
    calib = gen_synthetic(cfg.seed + 1000, n_samples, length, model.vocab_size)
    masks = init_model_masks(model, cfg.method, cfg.sparsity, calib.sequences)
    _, reports = barber_model(model, masks, calib.sequences, BarberConfig(alpha=alpha, granularity=cfg.granularity))
    return SuiteResult(cfg, sum(r.e_init for r in reports), sum(r.e_rebuilt for r in reports),
                       sum(r.n_applied for r in reports))


def run_suite(configs=None, alpha="auto") -> list[SuiteResult]:
    return [run_config(c, alpha) for c in (configs or suite_configs())]


def calibration_sweep(seed: int = 0, method: str = "magnitude", sizes=(1, 2, 4, 8),
                      length: int = 32, granularity: str = "block"):
    """Rebuild with the first ``n`` calibration sequences for each ``n`` in ``sizes``.

    Returns ``(sizes, held_out_errors)``: total block error of the rebuilt masks
    on a fixed held-out corpus, so numbers are comparable across sizes.
    """
    model = build_model(seed, vocab_size=32, d_model=16, d_ff=32, n_heads=2, n_block_pairs=2)
    pool = gen_synthetic(seed + 100, max(sizes), length, model.vocab_size)
    held = gen_synthetic(seed + 200, 8, length, model.vocab_size)
    errors = []
    for n in sizes:
        cal = pool.head(n).sequences
        masks = init_model_masks(model, method, 0.5, cal)
        rebuilt, _ = barber_model(model, masks, cal, BarberConfig(granularity=granularity))
        errors.append(sum(model_block_errors(model, rebuilt, held.sequences)))
    return list(sizes), errors
