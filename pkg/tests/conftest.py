import numpy as np
import pytest

from barber.model import AttentionBlock, LinearBlock, MlpBlock


def make_block(kind, seed, d=8, d_ff=16, heads=2, activation="silu"):
    rng = np.random.default_rng(seed)

    def lin(r, c):
        return rng.standard_normal((r, c)) / np.sqrt(c)

    gain = np.exp(0.3 * rng.standard_normal(d))
    if kind == "attention":
        return AttentionBlock(lin(d, d), lin(d, d), lin(d, d), lin(d, d), heads, gain)
    if kind == "mlp":
        return MlpBlock(lin(d_ff, d), lin(d, d_ff), activation, gain)
    return LinearBlock(lin(d_ff, d))


def random_mask(block, rng, keep=0.5):
    return {n: rng.random(w.shape) < keep for n, w in block.layers.items()}


def ones_mask(block):
    return {n: np.ones(w.shape, dtype=bool) for n, w in block.layers.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pinned():
    import json
    from pathlib import Path
    return json.loads((Path(__file__).parent / "pinned.json").read_text())


def run_pipeline(root, method="wanda", granularity="block", alpha="AUTO", nm=None):
    """gen-model -> gen-calib -> init-mask -> barber -> eval, all through the CLI entry point."""
    from barber.cli import main

    root.mkdir(parents=True, exist_ok=True)
    p = {k: str(root / k) for k in ("model.tbkt", "calib.tok", "init.tbmk", "rebuilt.tbmk",
                                    "report.csv", "pairs.csv", "eval.txt", "sweep.csv")}
    steps = [
        ["gen-model", "--seed", "3", "--d-model", "8", "--d-ff", "16", "--blocks", "1", "--vocab", "16",
         "--out", p["model.tbkt"]],
        ["gen-calib", "--seed", "4", "--n", "3", "--length", "12", "--vocab", "16", "--out", p["calib.tok"]],
        ["init-mask", "--model", p["model.tbkt"], "--calib", p["calib.tok"], "--method", method,
         "--out", p["init.tbmk"]] + (["--nm", nm] if nm else []),
        ["barber", "--model", p["model.tbkt"], "--mask", p["init.tbmk"], "--calib", p["calib.tok"],
         "--granularity", granularity, "--alpha", alpha, "--out", p["rebuilt.tbmk"],
         "--report-out", p["report.csv"], "--dist-out", p["pairs.csv"]] + (["--nm", nm] if nm else []),
        ["eval", "--model", p["model.tbkt"], "--mask", p["rebuilt.tbmk"], "--calib", p["calib.tok"],
         "--metric", "perplexity", "--out", p["eval.txt"]],
        ["sweep", "--model", p["model.tbkt"], "--calib", p["calib.tok"], "--methods", "magnitude,wanda",
         "--granularities", "block,output", "--calib-sizes", "1,3", "--out", p["sweep.csv"]],
    ]
    for argv in steps:
        code = main(argv)
        if code:
            raise AssertionError(f"{argv[0]} exited {code}")
    return p
