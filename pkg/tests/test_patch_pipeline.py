import os

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from sigma_mapper.core import Prng, Raster
from sigma_mapper.errors import DimensionError, ParameterError
from sigma_mapper.noise_synth import NoiseSpec
from sigma_mapper.patch_pipeline import (Corpus, augment, detail_score, dihedral_transform, downscale_by_averaging,
                                         make_minibatch, make_sample, read_manifest, select_fragment)

from .conftest import textured


def test_read_manifest_resolves_relative_paths(image_dir):
    folder, paths, manifest = image_dir
    assert read_manifest(manifest) == [os.path.join(str(folder), os.path.basename(p)) for p in paths]


def test_read_manifest_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(str(tmp_path / "nope.txt"))


def test_corpus_from_manifest(image_dir):
    _, _, manifest = image_dir
    corpus = Corpus.from_manifest(manifest)
    assert len(corpus) == 3
    assert corpus.sizes == [(48, 48)] * 3
    assert corpus.image(2).channels == 3
    corpus.validate(48)
    with pytest.raises(DimensionError):
        corpus.validate(64)


def test_downscale_by_averaging():
    r = Raster(np.arange(16.0).reshape(4, 4))
    d = downscale_by_averaging(r, 2)
    np.testing.assert_allclose(d.data[:, :, 0], [[2.5, 4.5], [10.5, 12.5]])
    assert downscale_by_averaging(r, 1) is r


def test_downscale_reduces_noise_variance():
    noise = Raster(np.random.default_rng(0).normal(0, 10, (256, 256)))
    assert downscale_by_averaging(noise, 2).data.std() == pytest.approx(5.0, rel=0.05)


def test_select_fragment_prefers_detail():
    data = np.zeros((32, 64))
    data[:, 32:] = np.indices((32, 32)).sum(axis=0) % 2 * 255  # right half: checkerboard
    image = Raster(data)
    picks = [select_fragment(image, 16, child) for child in Prng(1).split(20)]
    assert all(p.shape == (16, 16) for p in picks)
    mean_score = np.mean([detail_score(p) for p in picks])
    random_score = np.mean([detail_score(image.crop(0, int(x), 16, 16)) for x in Prng(1).integers(0, 49, 200)])
    assert mean_score > random_score


def test_select_fragment_overlaps_detail_in_most_trials():
    data = np.zeros((32, 64))
    data[:, 32:] = np.indices((32, 32)).sum(axis=0) % 2 * 255
    image = Raster(data)
    hits = 0
    for child in Prng(2).split(1000):
        pick = select_fragment(image, 16, child)
        hits += bool(pick.data.any())  # any checkerboard pixel means the crop reaches the right half
    assert hits >= 900


def test_corpus_rejects_zero_downscale(image_dir):
    with pytest.raises(ParameterError):
        Corpus.from_manifest(image_dir[2], downscale=0)


def test_select_fragment_too_small():
    with pytest.raises(DimensionError):
        select_fragment(Raster(np.zeros((8, 8))), 16, Prng(0))


def test_detail_score_flat_is_zero():
    assert detail_score(Raster(np.full((8, 8), 9.0))) == 0.0


def test_dihedral_identity_and_mirror():
    data = np.arange(9.0).reshape(3, 3)
    r = Raster(data)
    assert dihedral_transform(r, 0) == r
    np.testing.assert_array_equal(dihedral_transform(r, 1).data[:, :, 0], np.rot90(data))
    np.testing.assert_array_equal(dihedral_transform(r, 4).data[:, :, 0], data[:, ::-1])


def test_dihedral_rejects_bad_input():
    with pytest.raises(DimensionError):
        dihedral_transform(Raster(np.zeros((3, 4))), 1)
    with pytest.raises(ParameterError):
        dihedral_transform(Raster(np.zeros((3, 3))), 8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 7), st.integers(2, 6))
def test_dihedral_is_a_permutation(k, size):
    data = np.arange(size * size, dtype=np.float64).reshape(size, size)
    out = dihedral_transform(Raster(data), k).data.ravel()
    np.testing.assert_array_equal(np.sort(out), data.ravel())


def test_all_eight_transforms_distinct():
    r = Raster(np.arange(16.0).reshape(4, 4))
    results = {dihedral_transform(r, k).data.tobytes() for k in range(8)}
    assert len(results) == 8


def test_augment_is_one_of_eight():
    r = Raster(np.arange(16.0).reshape(4, 4))
    options = {dihedral_transform(r, k).data.tobytes() for k in range(8)}
    for child in Prng(3).split(10):
        assert augment(r, child).data.tobytes() in options


def test_make_sample_target_follows_brightness():
    corpus = Corpus.from_rasters([textured(32, 32, seed=5)])
    sample = make_sample(corpus, 16, NoiseSpec(), Prng(4), clipped=False)
    assert sample.patch.shape == (16, 16)
    assert sample.target.mean_variance() == pytest.approx(sample.sigma_av_sq, rel=1e-12)


def test_make_sample_black_fragment_falls_back_to_constant():
    corpus = Corpus.from_rasters([Raster(np.zeros((16, 16)))])
    sample = make_sample(corpus, 16, NoiseSpec(), Prng(1), clipped=True)
    np.testing.assert_allclose(sample.target.data, np.sqrt(sample.sigma_av_sq))
    assert sample.patch.data.min() >= 0


def test_minibatch_half_clipped():
    corpus = Corpus.from_rasters([textured(32, 32, seed=s) for s in range(3)])
    batch = make_minibatch(corpus, 8, 16, NoiseSpec(), Prng(0))
    assert len(batch) == 8
    assert sum(s.clipped for s in batch) == 4
    for s in batch:
        if s.clipped:
            assert s.patch.data.min() >= 0 and s.patch.data.max() <= 255


def test_minibatch_deterministic():
    corpus = Corpus.from_rasters([textured(32, 32, seed=s) for s in range(3)])
    a = make_minibatch(corpus, 4, 16, NoiseSpec(), Prng(9))
    b = make_minibatch(corpus, 4, 16, NoiseSpec(), Prng(9))
    for x, y in zip(a, b):
        assert x.patch == y.patch and x.target == y.target and x.clipped == y.clipped


@pytest.mark.parametrize("batch", [0, 3, 1])
def test_minibatch_rejects_odd_or_empty(batch):
    corpus = Corpus.from_rasters([textured(32, 32)])
    with pytest.raises(ParameterError):
        make_minibatch(corpus, batch, 16, NoiseSpec(), Prng(0))


def test_minibatch_empty_corpus():
    with pytest.raises(ParameterError):
        make_minibatch(Corpus.from_rasters([]), 4, 16, NoiseSpec(), Prng(0))


def test_minibatch_grayscale_from_colour_corpus():
    corpus = Corpus.from_rasters([textured(32, 32, 3)])
    batch = make_minibatch(corpus, 2, 16, NoiseSpec(), Prng(0), channels=1)
    assert all(s.patch.channels == 1 for s in batch)


def test_cross_image_brightness_source():
    corpus = Corpus.from_rasters([textured(32, 32, seed=s) for s in range(4)])
    batch = make_minibatch(corpus, 4, 16, NoiseSpec(), Prng(0), brightness_source="cross_image")
    assert all(s.target.shape == (16, 16) for s in batch)
    with pytest.raises(ParameterError):
        make_minibatch(corpus, 4, 16, NoiseSpec(), Prng(0), brightness_source="sky")
