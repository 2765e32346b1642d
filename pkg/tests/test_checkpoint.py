import struct

import numpy as np
import pytest

from barber.checkpoint import load_checkpoint, load_masks, model_header, save_checkpoint, save_masks
from barber.errors import FormatError, ShapeError
from barber.model import build_model
from conftest import random_mask


@pytest.fixture
def model():
    return build_model(7, vocab_size=10, d_model=8, d_ff=12, n_heads=2, n_block_pairs=2, activation="gelu")


def test_checkpoint_round_trip_bit_exact(model):
    data = save_checkpoint(model)
    back = load_checkpoint(data)
    assert save_checkpoint(back) == data
    assert back.activation == "gelu" and back.d_ff == 12
    for a, b in zip(model.blocks, back.blocks):
        for n in a.layers:
            assert np.array_equal(a.layers[n], b.layers[n])


def test_checkpoint_size(model):
    v, d, f = 10, 8, 12
    tensors = v * d + 2 * (d + 4 * d * d + d + 2 * f * d) + d + v * d
    assert len(save_checkpoint(model)) == 6 + 24 + 8 * tensors


def test_truncated_checkpoint(model):
    data = save_checkpoint(model)
    with pytest.raises(FormatError, match="truncated") as exc:
        load_checkpoint(data[:-3])
    assert exc.value.offset is not None


def test_trailing_bytes(model):
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(save_checkpoint(model) + b"\0")


def test_zero_vocab_reports_offset(model):
    data = bytearray(save_checkpoint(model))
    data[6:10] = struct.pack("<I", 0)
    with pytest.raises(FormatError, match="offset 6"):
        load_checkpoint(bytes(data))


def test_bad_magic_and_version(model):
    data = save_checkpoint(model)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(b"XXXXX" + data[5:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(data[:5] + b"\x09" + data[6:])


def test_heads_must_divide_width(model):
    data = bytearray(save_checkpoint(model))
    data[18:22] = struct.pack("<I", 3)
    with pytest.raises(FormatError):
        load_checkpoint(bytes(data))


def test_mask_round_trip(model, rng):
    masks = [random_mask(b, rng) for b in model.blocks]
    data = save_masks(model, masks)
    header, back = load_masks(data)
    assert header == model_header(model)
    for a, b in zip(masks, back):
        for n in a:
            assert np.array_equal(a[n], b[n])
    assert save_masks(model, back) == data


def test_mask_bytes_must_be_binary(model, rng):
    data = bytearray(save_masks(model, [random_mask(b, rng) for b in model.blocks]))
    data[40] = 2
    with pytest.raises(FormatError, match="offset 40"):
        load_masks(bytes(data))


def test_mask_count_mismatch(model, rng):
    with pytest.raises(ShapeError):
        save_masks(model, [random_mask(b, rng) for b in model.blocks[:2]])
