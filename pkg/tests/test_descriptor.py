import numpy as np
import pytest
import torch

from reposer.datagen import BACKGROUND, AngleConfig, make_model, render
from reposer.descriptor import (DescriptorGrid, FeatureExtractor, ToyBackend, extract, load_precomputed,
                                save_precomputed)


@pytest.fixture(scope="module")
def rendering():
    return render(make_model("shoe", 2), AngleConfig((60, 100, 45)), 64, 64)


def test_grid_shape_and_dim(rendering):
    g = extract(ToyBackend(), rendering.image, rendering.mask)
    assert g.shape == (8, 8) and g.dim == 64 and g.patch_stride == 8


@pytest.mark.parametrize("hw", [(8, 8), (16, 40), (128, 64)])
def test_shape_contract(hw):
    img = np.random.default_rng(0).random((3, *hw)).astype(np.float32)
    g = ToyBackend(dim=16).extract(img)
    assert g.grid.shape == (hw[0] // 8, hw[1] // 8, 16)


def test_background_only_has_zero_salience():
    img = np.full((3, 32, 32), BACKGROUND, dtype=np.float32)
    g = ToyBackend().extract(img)
    assert np.all(g.salience == 0) and g.all_background


def test_rejects_non_multiple_of_eight():
    with pytest.raises(ValueError):
        ToyBackend().extract(np.zeros((3, 30, 32), dtype=np.float32))


def test_salience_is_exact_foreground_fraction(rng):
    mask = rng.random((32, 48)) < 0.3
    img = rng.random((3, 32, 48)).astype(np.float32)
    g = ToyBackend().extract(img, mask)
    expected = mask.reshape(4, 8, 6, 8).sum(axis=(1, 3)) / 64.0
    assert np.array_equal(g.salience, expected.astype(np.float32))
    assert g.salience.min() >= 0 and g.salience.max() <= 1


def test_mask_derived_from_background_when_absent(rendering):
    backend = ToyBackend()
    a = backend.extract(rendering.image)
    b = backend.extract(rendering.image, rendering.mask)
    assert np.array_equal(a.salience, b.salience)


def test_translation_by_one_patch(rendering):
    backend = ToyBackend(seed=3)
    img, mask = rendering.image, rendering.mask
    shifted = np.full_like(img, BACKGROUND)
    shifted[:, :, 8:] = img[:, :, :-8]
    smask = np.zeros_like(mask)
    smask[:, 8:] = mask[:, :-8]
    g = backend.extract(img, mask)
    s = backend.extract(shifted, smask)
    np.testing.assert_allclose(s.grid[:, 1:], g.grid[:, :-1], rtol=0, atol=1e-6)
    np.testing.assert_array_equal(s.salience[:, 1:], g.salience[:, :-1])


def test_extract_deterministic(rendering):
    a = ToyBackend(seed=1).extract(rendering.image)
    b = ToyBackend(seed=1).extract(rendering.image)
    assert np.array_equal(a.grid, b.grid)


def test_precomputed_round_trip(tmp_path, rendering):
    g = ToyBackend().extract(rendering.image, rendering.mask)
    path = tmp_path / "desc.bin"
    save_precomputed(g, path)
    back = load_precomputed(path)
    assert np.array_equal(back.grid, g.grid) and np.array_equal(back.salience, g.salience)
    assert back.grid.dtype == np.float32


def test_precomputed_header_mismatch(tmp_path):
    g = DescriptorGrid(np.ones((4, 4, 64), np.float32), np.ones((4, 4), np.float32))
    path = tmp_path / "bad.bin"
    save_precomputed(g, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = (768).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        load_precomputed(path)


def test_precomputed_zero_grid_is_background(tmp_path):
    g = DescriptorGrid(np.zeros((2, 3, 8), np.float32), np.zeros((2, 3), np.float32))
    save_precomputed(g, tmp_path / "z.bin")
    assert load_precomputed(tmp_path / "z.bin").all_background


def test_feature_extractor_frozen_and_deterministic():
    fx = FeatureExtractor()
    assert all(not p.requires_grad for p in fx.parameters())
    fx.train()
    assert not fx.training
    x = torch.rand(2, 3, 32, 32)
    a, b = fx(x), FeatureExtractor()(x)
    assert fx.num_stages == 3 and len(a) == 3
    assert [t.shape[-1] for t in a] == [32, 16, 8]
    for s, t in zip(a, b):
        assert torch.equal(s, t)
