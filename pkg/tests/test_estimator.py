import math
import os
import time

import numpy as np
import pytest

from sigma_mapper.core import Prng, Raster, SigmaMap
from sigma_mapper.errors import DimensionError, NumericalError, ParameterError
from sigma_mapper.estimator import (EstimatorConfig, EstimatorParams, TrainSchedule, _tile_spans, adam_step, backward,
                                    context_margin, estimate, feature_shapes, forward, init_params, load_estimator,
                                    loss_and_gradients, loss_mse, param_shapes, receptive_radius, save_estimator,
                                    train)
from sigma_mapper.metrics import relative_map_error
from sigma_mapper.noise_synth import NoiseSpec, apply_noise, awgn_map
from sigma_mapper.patch_pipeline import Corpus, TrainingSample

from .conftest import textured

TINY = EstimatorConfig(channels=(2, 3, 4), blocks=1)


def tiny_params(seed=0, bias_scale=0.1):
    params = init_params(TINY, Prng(seed))
    rng = np.random.default_rng(seed)
    for name, t in params.tensors.items():
        if name.endswith(".b"):
            t += bias_scale * rng.normal(size=t.shape)
    return params


def sample(size=16, sigma=3.0, seed=0, channels=1):
    rng = np.random.default_rng(seed)
    patch = Raster(np.clip(128 + rng.normal(0, 40, (size, size, channels)), 0, 255))
    target = SigmaMap(sigma + rng.uniform(0, 2, (size, size)))
    return TrainingSample(patch=patch, target=target, clipped=False, sigma_av_sq=target.mean_variance())


def pointwise_params(config, weight=2.0, bias=0.5):
    """Every weight zero except the 1x1 input skip: sigma = softplus(weight * x / 255 + bias)"""
    tensors = {name: np.zeros(shape) for name, shape in param_shapes(config).items()}
    tensors["skip.w"][:] = weight
    tensors["skip.b"][:] = bias
    return EstimatorParams(tensors)


def test_param_names_cover_every_level():
    shapes = param_shapes(TINY)
    for name in ("head.w", "enc0.block0.conv1.w", "down2.w", "mid.block0.conv2.b", "up0.w",
                 "dec1.block0.conv1.w", "tail.w", "skip.w"):
        assert name in shapes
    assert shapes["down1.w"] == (4, 3, 2, 2)
    assert shapes["up1.w"] == (3, 4, 1, 1)
    assert shapes["tail.w"] == (1, 2, 3, 3)


def test_init_params_deterministic_and_bounded():
    a, b = init_params(TINY, Prng(5)), init_params(TINY, Prng(5))
    for name in a.tensors:
        np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
    w = a.tensors["enc1.block0.conv1.w"]
    assert np.abs(w).max() <= 1 / math.sqrt(3 * 9)
    assert (a.tensors["head.b"] == 0).all()


def test_feature_shapes_multiscale():
    params = init_params(EstimatorConfig(), Prng(0))
    shapes = feature_shapes(params, EstimatorConfig(), Raster(np.full((64, 64), 100.0)))
    assert shapes["enc0"] == (1, 16, 64, 64)
    assert shapes["enc1"] == (1, 32, 32, 32)
    assert shapes["enc2"] == (1, 64, 16, 16)
    assert shapes["mid"] == (1, 64, 8, 8)
    assert shapes["dec2"] == (1, 64, 16, 16)
    assert shapes["dec0"] == (1, 16, 64, 64)


def test_feature_shapes_pad_to_a_multiple_of_eight():
    config = EstimatorConfig()
    params = init_params(config, Prng(0))
    image = textured(50, 37)
    shapes = feature_shapes(params, config, image)
    assert shapes["enc0"] == (1, 16, 56, 40)
    assert shapes["enc1"] == (1, 32, 28, 20)
    assert shapes["enc2"] == (1, 64, 14, 10)
    assert shapes["mid"] == (1, 64, 7, 5)
    assert shapes["dec0"] == (1, 16, 56, 40)
    assert forward(params, config, image).shape == (50, 37)


def test_zero_network_outputs_log_two():
    tensors = {name: np.zeros(shape) for name, shape in param_shapes(TINY).items()}
    out = forward(EstimatorParams(tensors), TINY, Raster(np.full((16, 24), 90.0)))
    np.testing.assert_allclose(out.data, math.log(2.0))


@pytest.mark.parametrize("shape", [(13, 21), (8, 8), (1, 5), (70, 33)])
def test_forward_any_size_is_positive(shape):
    out = forward(tiny_params(), TINY, textured(*shape) if min(shape) >= 4 else Raster(np.full(shape, 50.0)))
    assert out.shape == shape
    assert (out.data > 0).all()


def test_constant_image_gives_constant_map():
    out = forward(tiny_params(seed=2), TINY, Raster(np.full((40, 24), 130.0))).data
    np.testing.assert_allclose(out, out[0, 0], rtol=1e-9)


def test_constant_image_map_is_rotation_invariant():
    params = init_params(EstimatorConfig(), Prng(4))
    image = np.full((64, 48), 60.0)
    out = forward(params, EstimatorConfig(), Raster(image)).data
    rotated = forward(params, EstimatorConfig(), Raster(np.rot90(image))).data
    np.testing.assert_allclose(np.rot90(out), rotated, rtol=1e-9)


def test_doubling_the_input_changes_the_map():
    config = EstimatorConfig()
    params = init_params(config, Prng(0))
    image = textured(32, 32)
    single = forward(params, config, image).data
    doubled = forward(params, config, Raster(2.0 * image.data)).data
    assert np.abs(doubled - single).max() > 1e-3


def test_receptive_radius_bounds_the_influence_of_a_pixel():
    params = tiny_params(seed=1)
    image = textured(200, 200, seed=2)
    bumped = image.data.copy()
    bumped[100, 100] += 50.0
    diff = np.abs(forward(params, TINY, Raster(bumped)).data - forward(params, TINY, image).data)
    rows, cols = np.nonzero(diff > 1e-12)
    assert len(rows)
    assert max(np.abs(rows - 100).max(), np.abs(cols - 100).max()) <= receptive_radius(TINY)


def test_context_margin_values():
    assert (receptive_radius(EstimatorConfig()), context_margin(EstimatorConfig())) == (118, 128)
    assert (receptive_radius(TINY), context_margin(TINY)) == (74, 88)


def test_forward_channel_mismatch():
    with pytest.raises(DimensionError):
        forward(tiny_params(), TINY, Raster(np.zeros((8, 8, 3))))


def test_non_finite_weights_name_the_layer():
    params = tiny_params()
    params.tensors["head.w"][0, 0, 1, 1] = np.inf
    with pytest.raises(NumericalError) as info:
        forward(params, TINY, textured(16, 16))
    assert info.value.layer == "head"


def test_loss_mse():
    assert loss_mse(SigmaMap.constant(3, 3, 2.0), SigmaMap.constant(3, 3, 5.0)) == pytest.approx(9.0)
    with pytest.raises(DimensionError):
        loss_mse(SigmaMap.constant(3, 3, 2.0), SigmaMap.constant(4, 3, 2.0))


def active_params(seed=3):
    """Small weights and positive conv1 biases: every ReLU input stays well above zero"""
    params = init_params(TINY, Prng(seed))
    for name, t in params.tensors.items():
        if name.endswith(".w"):
            t *= 0.1
        elif name.endswith(".conv1.b"):
            t[:] = 0.5
    return params


@pytest.mark.parametrize("make_params, eps", [
    (lambda: tiny_params(seed=3), 1e-6),
    (active_params, 1e-4),
], ids=["mixed", "active"])
def test_gradients_match_finite_differences(make_params, eps):
    params = make_params()
    batch = [sample(seed=4)]
    _, grads = loss_and_gradients(params, TINY, batch)

    def loss():
        return loss_mse(forward(params, TINY, batch[0].patch), batch[0].target)

    for name, tensor in sorted(params.tensors.items()):
        numeric = np.zeros_like(tensor)
        for i in np.ndindex(tensor.shape):
            old = tensor[i]
            tensor[i] = old + eps
            plus = loss()
            tensor[i] = old - eps
            minus = loss()
            tensor[i] = old
            numeric[i] = (plus - minus) / (2 * eps)
        scale = max(np.linalg.norm(numeric), np.linalg.norm(grads[name]), 1e-12)
        assert np.linalg.norm(numeric - grads[name]) / scale < 1e-4, name


def test_zero_residual_gives_zero_gradients():
    params = tiny_params()
    patch = textured(16, 16)
    target = forward(params, TINY, patch)
    grads = backward(params, TINY, [TrainingSample(patch, target, False, target.mean_variance())])
    for g in grads.values():
        np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_duplicated_batch_gives_the_same_gradients():
    params = tiny_params()
    s = sample(seed=5)
    single_loss, single = loss_and_gradients(params, TINY, [s])
    double_loss, double = loss_and_gradients(params, TINY, [s, s])
    assert double_loss == pytest.approx(single_loss, rel=1e-12)
    for name in single:
        np.testing.assert_allclose(double[name], single[name], rtol=1e-9, atol=1e-12)


def test_batch_must_share_shape():
    with pytest.raises(DimensionError):
        loss_and_gradients(tiny_params(), TINY, [sample(16), sample(24)])


def test_adam_first_step_moves_by_learning_rate():
    params = tiny_params()
    before = {k: t.copy() for k, t in params.tensors.items()}
    grads = {k: np.full(t.shape, 0.5) for k, t in params.tensors.items()}
    grads["head.b"][:] = -2.0
    adam_step(params, grads, 1e-3, TINY)
    assert params.iteration == 1
    np.testing.assert_allclose(params.tensors["tail.w"] - before["tail.w"], -1e-3, rtol=1e-6)
    np.testing.assert_allclose(params.tensors["head.b"] - before["head.b"], 1e-3, rtol=1e-6)


def test_adam_rejects_non_finite_gradient():
    params = tiny_params()
    grads = {k: np.zeros(t.shape) for k, t in params.tensors.items()}
    grads["mid.block0.conv1.w"][0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        adam_step(params, grads, 1e-3, TINY)


def test_adam_fits_a_fixed_batch():
    params = tiny_params()
    batch = [sample(seed=1), sample(seed=2)]
    start, _ = loss_and_gradients(params, TINY, batch)
    for _ in range(300):
        _, grads = loss_and_gradients(params, TINY, batch)
        adam_step(params, grads, 1e-2, TINY)
    end, _ = loss_and_gradients(params, TINY, batch)
    assert end < 0.5 * start


def test_schedule_boundary_and_presets():
    s = TrainSchedule(total_iterations=3000)
    assert s.stage_boundary == 2000
    assert s.lr_at(1999) == s.lr_stage1
    assert s.lr_at(2000) == s.lr_stage2
    full = TrainSchedule.full()
    assert (full.total_iterations, full.batch, full.patch) == (150000, 32, 128)
    assert (full.lr_stage1, full.lr_stage2) == (1e-5, 5e-6)
    assert TrainSchedule.desk().batch == 8


@pytest.mark.parametrize("kwargs", [
    {"patch": 60},
    {"lr_stage1": 1e-4, "lr_stage2": 1e-3},
    {"total_iterations": -1},
    {"stage1_fraction": 0.0},
])
def test_schedule_rejects(kwargs):
    with pytest.raises(ParameterError):
        TrainSchedule(**kwargs)


def test_estimator_config_validation():
    with pytest.raises(ParameterError):
        EstimatorConfig(channels=(8, 16))
    with pytest.raises(ParameterError):
        EstimatorConfig(input_channels=2)
    assert EstimatorConfig.from_dict(TINY.to_dict()) == TINY


def test_save_and_load_estimator(tmp_path):
    params = tiny_params()
    grads = {k: np.ones(t.shape) for k, t in params.tensors.items()}
    adam_step(params, grads, 1e-3, TINY)
    path = str(tmp_path / "e.ckpt")
    save_estimator(params, TINY, path)
    loaded, config = load_estimator(path)
    assert config == TINY
    assert loaded.iteration == 1
    for name in params.tensors:
        np.testing.assert_array_equal(loaded.tensors[name], params.tensors[name])
        np.testing.assert_array_equal(loaded.m[name], params.m[name])
        np.testing.assert_array_equal(loaded.v[name], params.v[name])
    image = textured(24, 24)
    assert forward(loaded, config, image) == forward(params, TINY, image)


def test_load_estimator_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_estimator(str(tmp_path / "none.ckpt"))


def test_estimate_tiles_match_whole_image():
    config = EstimatorConfig(channels=(2, 3, 4), blocks=1)
    params = pointwise_params(config)
    image = textured(150, 100, seed=3)
    tiled = estimate(params, config, image, tile=64, overlap=16)
    whole = forward(params, config, image)
    np.testing.assert_allclose(tiled.data, whole.data, rtol=1e-12)
    expected = np.logaddexp(0.0, 2.0 * image.data[:, :, 0] / 255.0 + 0.5)
    np.testing.assert_allclose(tiled.data, expected, rtol=1e-12)


def test_estimate_tiles_match_whole_image_for_a_random_network():
    config = EstimatorConfig()
    params = init_params(config, Prng(0))
    image = textured(256, 256, seed=5)
    tiled = estimate(params, config, image, tile=128)
    whole = forward(params, config, image)
    assert np.abs(tiled.data - whole.data).max() < 1e-3


def test_estimate_tiny_network_tiles():
    assert _tile_spans(256, 64, 48) == [(0, 64), (48, 112), (96, 160), (144, 208), (192, 256)]
    assert _tile_spans(150, 64, 48) == [(0, 64), (48, 112), (80, 150)]
    assert _tile_spans(60, 64, 48) == [(0, 60)]
    params = tiny_params(seed=6)
    image = textured(256, 256, seed=6)
    tiled = estimate(params, TINY, image, tile=64, overlap=16)
    np.testing.assert_allclose(tiled.data, forward(params, TINY, image).data, rtol=1e-9)


def test_estimate_constant_image_has_no_seams():
    out = estimate(tiny_params(seed=7), TINY, Raster(np.full((200, 130), 77.0)), tile=64).data
    np.testing.assert_allclose(out, out[0, 0], rtol=1e-9)


def test_estimate_grayscale_model_on_colour_image():
    params = pointwise_params(TINY)
    image = textured(32, 32, 3)
    out = estimate(params, TINY, image)
    per_channel = [forward(params, TINY, Raster(image.data[:, :, c])).data for c in range(3)]
    np.testing.assert_allclose(out.data, np.mean(per_channel, axis=0))


def test_estimate_rejects_bad_tile():
    with pytest.raises(ParameterError):
        estimate(tiny_params(), TINY, textured(16, 16), tile=60)
    with pytest.raises(ParameterError):
        estimate(tiny_params(), TINY, textured(16, 16), tile=64, overlap=12)


def small_schedule(total=4, **kwargs):
    values = dict(total_iterations=total, batch=2, patch=16, lr_stage1=1e-3, lr_stage2=5e-4,
                  checkpoint_every=2, log_every=1)
    values.update(kwargs)
    return TrainSchedule(**values)


def small_corpus():
    return Corpus.from_rasters([textured(32, 32, seed=s) for s in range(3)])


def test_train_is_deterministic_and_checkpoints(tmp_path):
    logs = [[], []]
    results = []
    for run in range(2):
        params = train(small_corpus(), TINY, small_schedule(), NoiseSpec(), Prng(7),
                       on_step=lambda i, lr, loss, log=logs[run]: log.append((i, lr, loss)),
                       checkpoint_dir=str(tmp_path / f"run{run}"), progress=False)
        results.append(params)
    assert logs[0] == logs[1]
    assert [entry[0] for entry in logs[0]] == [1, 2, 3, 4]
    assert [entry[1] for entry in logs[0]] == [1e-3, 1e-3, 1e-3, 5e-4]
    for name in results[0].tensors:
        np.testing.assert_array_equal(results[0].tensors[name], results[1].tensors[name])
    assert sorted(os.listdir(tmp_path / "run0")) == ["iter_000002.ckpt", "iter_000004.ckpt"]


def test_train_resume_matches_uninterrupted_run():
    full = train(small_corpus(), TINY, small_schedule(total=4), NoiseSpec(), Prng(3), progress=False)
    half = train(small_corpus(), TINY, small_schedule(total=2, stage1_fraction=1.0), NoiseSpec(), Prng(3),
                 progress=False)
    resumed = train(small_corpus(), TINY, small_schedule(total=4), NoiseSpec(), Prng(3), params=half,
                    progress=False)
    assert resumed.iteration == 4
    for name in full.tensors:
        np.testing.assert_array_equal(full.tensors[name], resumed.tensors[name])


def test_train_rejects_small_corpus():
    corpus = Corpus.from_rasters([textured(8, 8)])
    with pytest.raises(DimensionError):
        train(corpus, TINY, small_schedule(), NoiseSpec(), Prng(0), progress=False)


@pytest.mark.slow
def test_desk_training_halves_the_map_error():
    corpus = Corpus.from_rasters([textured(96, 96, seed=s) for s in range(20)])
    config = EstimatorConfig()
    untrained = init_params(config, Prng(1).child(0))
    started = time.perf_counter()
    trained = train(corpus, config, TrainSchedule.desk(), NoiseSpec(), Prng(1), progress=False)
    assert time.perf_counter() - started <= 1800

    def eps_m(params):
        estimates, truths = [], []
        for k, sigma in enumerate((10.0, 20.0, 30.0)):
            truth = awgn_map(64, 64, sigma)
            noisy = apply_noise(textured(64, 64, seed=100 + k), truth, NoiseSpec(), Prng(k))
            estimates.append(forward(params, config, noisy))
            truths.append(truth)
        return relative_map_error(estimates, truths)

    assert eps_m(trained) <= 0.5 * eps_m(untrained)
    assert eps_m(trained) <= 0.25
