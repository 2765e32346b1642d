"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line."""
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from barber.engine import (GRANULARITIES, BarberConfig, barber_block, build_pairs, group_counts,
                           group_ids, importance_scores, nm_rebuild, predicted_delta_e)
from barber.masks import (NmPattern, init_block_mask, is_nm, magnitude_mask, obs_mask,
                          to_nm, wanda_mask)
from barber.model import LinearBlock, block_backward, block_forward, block_loss_and_grads
from barber.oracle import (exhaustive_mask_search, fd_gradient, gradient_mismatches,
                           scalar_layer_error, true_delta_e)
from barber.suite import calibration_sweep, run_suite
from conftest import make_block, ones_mask, pinned, random_mask, run_pipeline


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def test_c01_gradient_correctness(report):
    t0 = time.perf_counter()
    bad, entries = [], 0
    for seed in range(40):
        kind = "attention" if seed < 20 else "mlp"
        d = (8, 12, 16)[seed % 3]
        blk = make_block(kind, seed, d=d, d_ff=2 * d, heads=2)
        rng = np.random.default_rng(seed + 100)
        m = random_mask(blk, rng)
        x = rng.standard_normal((d, 6))
        lengths = (2, 4) if kind == "attention" else None
        g = block_backward(blk, m, x, block_forward(blk, None, x, lengths), lengths)
        bad += gradient_mismatches(g, fd_gradient(blk, m, x, lengths=lengths))
        entries += sum(v.size for v in g.values())
    dt = time.perf_counter() - t0
    report(1, not bad and dt < 60,
           f"{len(bad)} of {entries} gradient entries outside 1e-4 rel / 1e-8 abs; {dt:.1f} s")


def test_c02_first_order_consistency(report):
    t, worst = 1e-4, 0.0
    for seed in range(10):
        blk = make_block(("attention", "mlp")[seed % 2], seed)
        rng = np.random.default_rng(seed + 50)
        m = random_mask(blk, rng)
        x = rng.standard_normal((8, 6))
        _, g = block_loss_and_grads(blk, m, x, block_forward(blk, None, x))
        pair = build_pairs(importance_scores(blk.layers, g), m, "block")[0][0]
        pred = predicted_delta_e(blk.layers, g, pair, t) / t
        true = true_delta_e(blk, m, x, pair, t) / t
        worst = max(worst, abs(true - pred) / abs(pred))
    report(2, worst < 0.01, f"worst relative gap between dE(t)/t and prediction {worst:.2e} (10 pairs)")


def test_c03_sparsity_conservation(report):
    failures = 0
    alphas = ("auto", 1, 0.5, Fraction(1, 3), 0.1)
    for seed in range(200):
        rng = np.random.default_rng(seed)
        kind = ("attention", "mlp", "linear")[seed % 3]
        gran = GRANULARITIES[seed % 4]
        blk = make_block(kind, seed)
        m = random_mask(blk, rng, keep=rng.uniform(0.2, 0.8))
        cfg = BarberConfig(alpha=alphas[seed % 5], granularity=gran, count_scope=("block", "group")[seed // 100])
        out, _ = barber_block(blk, m, rng.standard_normal((8, 6)), cfg)
        gids = group_ids(blk.layers, gran)
        failures += not np.array_equal(group_counts(out, gids), group_counts(m, gids))
    report(3, failures == 0, f"{200 - failures}/200 configs keep every per-group nonzero count")


def test_c04_nm_preservation(report):
    ok = {}
    for pat in (NmPattern(2, 4), NmPattern(4, 8)):
        good = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            blk = make_block(("attention", "mlp")[seed % 2], seed)
            m = {n: to_nm(rng.random(w.shape), pat) for n, w in blk.layers.items()}
            alpha = ("auto", 1, 0.5)[seed % 3]
            out, _ = nm_rebuild(blk, m, rng.standard_normal((8, 6)), BarberConfig(alpha=alpha, nm=pat))
            good += all(is_nm(v, pat) for v in out.values())
        ok[str(pat)] = good
    report(4, all(v == 100 for v in ok.values()), f"valid N:M after rebuild: {ok} of 100 each")


def test_c05_zero_alpha_and_dense_fixed_point(report):
    bad, n = 0, 0
    for seed in range(12):
        rng = np.random.default_rng(seed)
        blk = make_block(("attention", "mlp", "linear")[seed % 3], seed)
        x = rng.standard_normal((8, 6))
        m = random_mask(blk, rng)
        nm_mask = {k: to_nm(rng.random(w.shape), NmPattern(2, 4)) for k, w in blk.layers.items()}
        configs = [(m, BarberConfig(alpha=0, granularity=g, count_scope=s)) for g in GRANULARITIES
                   for s in ("block", "group")] + [(nm_mask, BarberConfig(alpha=0, nm=NmPattern(2, 4)))]
        configs += [(ones_mask(blk), BarberConfig(alpha=a, granularity=g)) for g in GRANULARITIES for a in ("auto", 1)]
        for mask, cfg in configs:
            out, rep = barber_block(blk, mask, x, cfg)
            n += 1
            same = all(out[k].tobytes() == np.asarray(mask[k], bool).tobytes() for k in mask)
            bad += not (same and rep.e_rebuilt == rep.e_init and rep.n_applied == 0)
    report(5, bad == 0, f"{n - bad}/{n} zero-alpha / all-ones runs returned the input mask bit-exactly")


def test_c06_error_improvement(report):
    results = run_suite()
    improved = sum(r.improved for r in results)
    by_method = {}
    for r in results:
        by_method.setdefault(r.config.method, []).append(r.relative_reduction)
    mean = {k: float(np.mean(v)) for k, v in by_method.items()}
    floor = pinned()["suite_improved"]
    largest = max(mean, key=mean.get)
    ok = len(results) >= 50 and improved * floor["total"] >= floor["improved"] * len(results) and largest == "magnitude"
    detail = (f"E_r < E_i in {improved}/{len(results)} (pinned {floor['improved']}/{floor['total']}); "
              "mean relative reduction " + ", ".join(f"{k} {v:.3f}" for k, v in mean.items()))
    report(6, ok, detail)


def test_c07_oracle_dominance(report):
    dominated = barber_ok = cases = 0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        r, c = int(rng.integers(1, 4)), int(rng.integers(2, 4))
        w = rng.standard_normal((r, c))
        x = rng.standard_normal((c, 4)) * rng.uniform(0.2, 3.0, (c, 1))
        blk = LinearBlock(w)
        for method in ("magnitude", "wanda", "obs"):
            m = init_block_mask(blk, method, 0.5, x)
            zeros = int((~m["w"]).sum())
            _, best = exhaustive_mask_search(w, x, Fraction(zeros, w.size))
            # same evaluator on both sides so equal masks give equal errors
            dominated += best <= scalar_layer_error(w, m["w"], x)
            _, rep = barber_block(blk, m, x, BarberConfig())
            barber_ok += rep.e_rebuilt <= rep.e_init
            cases += 1
    report(7, dominated == cases and barber_ok == cases,
           f"exhaustive <= initializer in {dominated}/{cases}; AUTO E_r <= E_i in {barber_ok}/{cases}")


def test_c08_initializer_cross_checks(report):
    wanda_ok = obs_ok = n = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        rows, cols = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        w = {"w": rng.standard_normal((rows, cols))}
        x = rng.standard_normal((cols, 12))
        iso = x / np.linalg.norm(x, axis=1, keepdims=True) * 2.0
        q, _ = np.linalg.qr(rng.standard_normal((cols, cols)))
        for s in (0.25, 0.5, 0.75):
            row_mag = magnitude_mask(w, s, scope="row")["w"]
            wanda_ok += np.array_equal(wanda_mask(w, {"w": iso}, s)["w"], row_mag)
            obs_ok += np.array_equal(obs_mask(w, {"w": 2.0 * q}, s)["w"], row_mag)
            n += 1
    report(8, wanda_ok == n and obs_ok == n,
           f"wanda == row magnitude (isotropic X) {wanda_ok}/{n}; obs == row magnitude (XX^T ~ I) {obs_ok}/{n}")


def test_c09_cli_determinism(report, tmp_path, capsys):
    variants = [dict(method="magnitude"), dict(method="wanda", granularity="output"),
                dict(method="obs", granularity="input", alpha="1"), dict(method="wanda", nm="2:4", alpha="1")]
    mismatched = []
    for i, kw in enumerate(variants):
        a = run_pipeline(tmp_path / f"{i}a", **kw)
        b = run_pipeline(tmp_path / f"{i}b", **kw)
        for k in a:
            if Path(a[k]).read_bytes() != Path(b[k]).read_bytes():
                mismatched.append(f"{kw}:{k}")
    capsys.readouterr()
    report(9, not mismatched, f"{len(variants)} pipelines x 8 artifacts rerun byte-identical"
           if not mismatched else f"differing outputs: {mismatched}")


def test_c10_calibration_robustness(report):
    sizes, errors = calibration_sweep()
    variation = (max(errors) - min(errors)) / min(errors)
    pin = pinned()["calibration_sweep_variation"]
    report(10, variation < 0.20 and variation <= pin + 1e-4,
           f"held-out E_r over calib sizes {sizes}: " + ", ".join(f"{e:.1f}" for e in errors)
           + f"; variation {variation:.4f} (< 0.20, pinned {pin})")
