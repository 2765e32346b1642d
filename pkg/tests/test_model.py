import numpy as np
import pytest

from barber.errors import InputError, ShapeError
from barber.model import (LinearBlock, MlpBlock, block_backward, block_forward, build_model,
                          layer_inputs, model_forward, perplexity)
from barber.oracle import (FdConfig, fd_gradient, gradient_mismatches, oracle_block_forward,
                           scalar_block_forward, scalar_perplexity)
from conftest import make_block, ones_mask, random_mask


@pytest.mark.parametrize("kind", ["attention", "mlp", "linear"])
def test_all_ones_mask_equals_dense(kind, rng):
    blk = make_block(kind, 3)
    x = rng.standard_normal((8, 5))
    assert np.array_equal(block_forward(blk, ones_mask(blk), x), block_forward(blk, None, x))


def test_zero_up_projection_is_passthrough(rng):
    blk = make_block("mlp", 0)
    blk = MlpBlock(np.zeros_like(blk.w_up), blk.w_down, "silu", blk.gain)
    x = rng.standard_normal((8, 4))
    assert np.array_equal(block_forward(blk, None, x), x)


@pytest.mark.parametrize("kind", ["attention", "mlp"])
def test_fully_pruned_block_is_passthrough(kind, rng):
    blk = make_block(kind, 1)
    x = rng.standard_normal((8, 4))
    zero = {n: np.zeros(w.shape, dtype=bool) for n, w in blk.layers.items()}
    assert np.array_equal(block_forward(blk, zero, x), x)


def test_attention_matches_scalar_loop(rng):
    blk = make_block("attention", 7, d=8, heads=2)
    x = rng.standard_normal((8, 4))
    m = random_mask(blk, rng, 0.7)
    eff = {n: w * m[n] for n, w in blk.layers.items()}
    assert np.max(np.abs(block_forward(blk, m, x) - scalar_block_forward(blk, eff, x))) < 1e-10


def test_mlp_matches_scalar_loop(rng):
    blk = make_block("mlp", 8, activation="gelu")
    x = rng.standard_normal((8, 3))
    assert np.max(np.abs(block_forward(blk, None, x) - scalar_block_forward(blk, blk.layers, x))) < 1e-10


def test_sequences_do_not_attend_across_boundaries(rng):
    blk = make_block("attention", 2)
    x = rng.standard_normal((8, 7))
    joint = block_forward(blk, None, x, lengths=(3, 4))
    assert np.array_equal(joint[:, :3], block_forward(blk, None, x[:, :3]))
    assert np.max(np.abs(joint[:, 3:] - block_forward(blk, None, x[:, 3:]))) < 1e-14
    assert np.max(np.abs(joint - oracle_block_forward(blk, blk.layers, x, (3, 4)))) < 1e-12


def test_bad_lengths_and_shapes(rng):
    blk = make_block("attention", 2)
    with pytest.raises(ShapeError):
        block_forward(blk, None, rng.standard_normal((8, 5)), lengths=(2, 2))
    with pytest.raises(ShapeError):
        block_forward(blk, None, rng.standard_normal((6, 5)))


def test_linear_block_fractional_mask_gradient():
    w, x = 1.5, np.array([[0.5, -2.0, 1.0]])
    blk = LinearBlock(np.array([[w]]))
    m = 0.25
    target = block_forward(blk, None, x)
    g = block_backward(blk, {"w": np.array([[m]])}, x, target)["w"][0, 0]
    expected = -2 * float(np.sum(x ** 2)) * (w - m * w)
    assert abs(g - expected) < 1e-12


@pytest.mark.parametrize("kind,seed", [("mlp", 0), ("mlp", 1), ("attention", 2), ("attention", 3)])
def test_gradients_match_finite_differences(kind, seed):
    blk = make_block(kind, seed)
    rng = np.random.default_rng(seed + 10)
    m = random_mask(blk, rng)
    x = rng.standard_normal((8, 6))
    lengths = (3, 3) if kind == "attention" else None
    target = block_forward(blk, None, x, lengths)
    g = block_backward(blk, m, x, target, lengths)
    assert gradient_mismatches(g, fd_gradient(blk, m, x, FdConfig(), lengths)) == []


@pytest.mark.parametrize("kind", ["attention", "mlp", "linear"])
def test_dense_mask_has_zero_gradient(kind, rng):
    blk = make_block(kind, 4)
    x = rng.standard_normal((8, 5))
    g = block_backward(blk, ones_mask(blk), x, block_forward(blk, None, x))
    assert all(np.all(v == 0) for v in g.values())


def test_layer_inputs_shapes(rng):
    blk = make_block("mlp", 0)
    x = rng.standard_normal((8, 5))
    ins = layer_inputs(blk, x)
    assert ins["up"].shape == (8, 5) and ins["down"].shape == (16, 5)


def test_model_forward_composes_blocks():
    model = build_model(0, vocab_size=11, d_model=8, d_ff=16, n_block_pairs=2)
    toks = [1, 4, 2, 9]
    h = model.embedding[toks].T
    for b in model.blocks:
        h = oracle_block_forward(b, b.layers, h)
    from barber.oracle import _rms
    logits = _rms(h.T, model.final_gain) @ model.head.T
    assert model_forward(model, toks).shape == (4, 11)
    assert np.max(np.abs(model_forward(model, toks) - logits)) < 1e-10


def test_out_of_range_token():
    model = build_model(0, vocab_size=11, d_model=8, d_ff=16, n_block_pairs=1)
    with pytest.raises(InputError, match="position 1"):
        model_forward(model, [1, 11])


def test_build_model_validation():
    with pytest.raises(InputError):
        build_model(0, d_model=10, n_heads=3)
    with pytest.raises(InputError):
        build_model(0, vocab_size=0)
    a, b = build_model(5), build_model(5)
    assert np.array_equal(a.head, b.head)


def test_perplexity_zero_head_is_vocab_size():
    model = build_model(0, vocab_size=13, d_model=8, d_ff=16, n_block_pairs=1)
    model = type(model)(model.embedding, model.blocks, model.final_gain, np.zeros_like(model.head),
                        model.n_heads, model.activation, model.d_ff)
    assert abs(perplexity(model, None, [[1, 2, 3]]) - 13) < 1e-12


def test_perplexity_dense_equals_all_ones_and_oracle(rng):
    model = build_model(3, vocab_size=16, d_model=8, d_ff=16, n_block_pairs=2)
    seqs = [rng.integers(0, 16, 6).tolist(), rng.integers(0, 16, 4).tolist()]
    ones = [ones_mask(b) for b in model.blocks]
    assert perplexity(model, None, seqs) == perplexity(model, ones, seqs)
    masks = [random_mask(b, rng) for b in model.blocks]
    assert abs(perplexity(model, masks, seqs) - scalar_perplexity(model, masks, seqs)) < 1e-8


def test_perplexity_rejects_empty():
    model = build_model(0, vocab_size=8, d_model=8, d_ff=16, n_block_pairs=1)
    with pytest.raises(InputError):
        perplexity(model, None, [])
    with pytest.raises(InputError):
        perplexity(model, None, [[3]])
