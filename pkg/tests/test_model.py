import numpy as np
import pytest

from mcalab import autodiff as ad
from mcalab.datagen import Item
from mcalab.errors import ContractError, FormatError, IncompatibleCheckpointError, InvalidInputError
from mcalab.model import (EncoderConfig, ItemBatch, encode, encode_array, init_params, load_checkpoint,
                          parameter_shapes, save_checkpoint, unimodal_parts)
from mcalab.rng import Rng

CFG = EncoderConfig(image_dim=32, text_vocab=16)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, 0)


def random_batch(n, seed=0, kinds="mixed"):
    rng = Rng(seed, "batch")
    image = rng.child("img").normal(n * 32).reshape(n, 32)
    token = rng.child("tok").integers(n, 16)
    has_image = np.ones(n, dtype=bool)
    if kinds == "mixed":
        k = rng.child("kind").integers(n, 3)
        has_image[k == 1] = False
        token[k == 2] = -1
    return ItemBatch(image, has_image, token)


def test_manifest_is_ordered_and_stable():
    names = [n for n, _ in parameter_shapes(CFG)]
    assert names[:5] == ["image_proj.weight", "image_proj.bias", "text_embed.weight", "absent_image", "absent_text"]
    assert names[-2:] == ["out_proj.weight", "out_proj.bias"]
    assert list(init_params(CFG, 1).tensors) == names


def test_init_is_seeded(params):
    again = init_params(CFG, 0)
    assert all(np.array_equal(params[k].data, again[k].data) for k in params)
    assert not np.array_equal(params["trunk.0.weight"].data, init_params(CFG, 1)["trunk.0.weight"].data)
    assert np.all(params["trunk.0.bias"].data == 0)


def test_rows_are_unit_norm(params):
    out = encode(params, random_batch(200)).data
    assert out.shape == (200, 64)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_permutation_equivariance_exact(params):
    batch = random_batch(2)
    swapped = batch.take([1, 0])
    a, b = encode(params, batch).data, encode(params, swapped).data
    assert np.array_equal(a[::-1], b)


@pytest.mark.parametrize("size", [1, 3, 17, 64])
def test_rows_independent_of_batch_composition(params, size):
    big = random_batch(64, seed=4)
    full = encode(params, big).data
    idx = Rng(size).permutation(64)[:size]
    assert np.array_equal(encode(params, big.take(idx)).data, full[idx])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_composed_differs_from_image_part(seed):
    p = init_params(CFG, seed)
    batch = random_batch(1000, seed=seed, kinds="composed")
    comp = encode_array(p, batch)
    img = encode_array(p, batch.image_parts())
    cos = np.sum(comp * img, axis=1)
    assert np.mean(cos < 1 - 1e-6) >= 0.99


def test_items_and_batches_agree(params):
    items = [Item(np.ones(32), 3), Item(None, 5), Item(np.arange(32.0) / 32, None)]
    a = encode(params, items).data
    b = encode(params, ItemBatch.from_items(items, 32)).data
    assert np.array_equal(a, b)


def test_unimodal_parts():
    v = np.arange(4.0)
    img, txt = unimodal_parts(Item(v, 3))
    assert img.text_token is None and np.array_equal(img.image_view, v)
    assert txt.image_view is None and txt.text_token == 3
    assert not img.is_composed and not txt.is_composed
    with pytest.raises(ContractError):
        unimodal_parts(Item(v, None))


def test_input_contracts(params):
    with pytest.raises(ContractError):
        encode(params, ItemBatch(np.zeros((1, 32)), np.array([False]), np.array([-1])))
    with pytest.raises(InvalidInputError):
        encode(params, ItemBatch(np.zeros((1, 32)), np.array([True]), np.array([16])))
    with pytest.raises(InvalidInputError):
        encode(params, ItemBatch(np.zeros((1, 31)), np.array([True]), np.array([0])))


def test_text_free_batch_leaves_table_untouched():
    p = init_params(CFG, 3)
    batch = random_batch(32, kinds="composed").image_parts()
    ad.backward(ad.sum_all(encode(p, batch)))
    assert p["text_embed.weight"].grad is None or not p["text_embed.weight"].grad.any()
    assert np.any(p["absent_text"].grad)


def test_checkpoint_roundtrip(params, tmp_path):
    path = tmp_path / "m.ckpt"
    blob = save_checkpoint(params, 42, path)
    loaded, step = load_checkpoint(path, EncoderConfig())
    assert step == 42
    batch = random_batch(50)
    assert np.max(np.abs(encode(params, batch).data - encode(loaded, batch).data)) < 1e-6
    # float32 storage: saving the loaded params reproduces the bytes
    assert save_checkpoint(loaded, 42, tmp_path / "again.ckpt") == blob


def test_checkpoint_mismatch_and_corruption(params, tmp_path):
    path = tmp_path / "m.ckpt"
    blob = save_checkpoint(params, 1, path)
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(path, EncoderConfig(d_model=32))
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(path, EncoderConfig(text_vocab=8))
    bad = bytearray(blob)
    bad[-1] ^= 0xFF
    path.write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="checksum"):
        load_checkpoint(path)
