"""
Tests for the phase-profile network and its baseline
"""

from fractions import Fraction

import numpy as np
import pytest

from engine.tensor import Tensor, no_grad
from services.model_service import (
    ModelConfig,
    ModelParameters,
    encode_spatial,
    fuse,
    height_features,
    init_parameters,
    multiscale_generate,
    parameter_shapes,
    run_model,
)
from utils.validation import ConfigurationError, ShapeError


class TestModelConfig:

    def test_defaults(self):
        config = ModelConfig()
        assert config.in_channels == 20
        assert config.height_dim == 38
        assert config.scale_strings() == ["1", "1/2", "1/4"]

    def test_yaml_round_trip(self, tmp_path, mini_config):
        path = mini_config.save(tmp_path / "model.yaml")
        assert ModelConfig.load(path) == mini_config

    def test_load_nested_settings_block(self, tmp_path):
        path = tmp_path / "settings.yaml"
        path.write_text("model:\n  embed_dim: 5\n  scales: ['1', '1/2']\n")
        config = ModelConfig.load(path)
        assert config.embed_dim == 5
        assert config.scales == (Fraction(1), Fraction(1, 2))

    def test_float_scales_parse(self):
        assert ModelConfig(scales=(1, 0.5)).scales == (Fraction(1), Fraction(1, 2))

    @pytest.mark.parametrize("mapping", [
        {"scales": ["1/2", "1"]},
        {"embed_dim": 0},
        {"kernel_size": 4},
        {"activation": "gelu"},
        {"architecture": "unet"},
        {"dropout": 0.1},
    ])
    def test_invalid(self, mapping):
        with pytest.raises(ConfigurationError):
            ModelConfig.from_mapping(mapping)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            ModelConfig.load(tmp_path / "absent.yaml")


class TestParameters:

    def test_init_is_seeded(self, mini_config):
        a = init_parameters(mini_config, seed=3).to_arrays()
        b = init_parameters(mini_config, seed=3).to_arrays()
        c = init_parameters(mini_config, seed=4).to_arrays()
        assert all(np.array_equal(a[n], b[n]) for n in a)
        assert not all(np.array_equal(a[n], c[n]) for n in a)

    def test_names_and_shapes(self, grad_config):
        shapes = parameter_shapes(grad_config)
        assert shapes["encoder.0.weight"] == (3, 2, 3, 3)
        assert shapes["height.embedding"] == (1, 4, 3)
        assert shapes["generator.fuse.weight"] == (2, 4, 1, 1, 1)
        assert shapes["gate.weight"] == (4, 2, 3, 3, 3)
        params = init_parameters(grad_config)
        assert list(params) == list(shapes)

    def test_init_within_fan_in_bound(self, grad_config):
        params = init_parameters(grad_config)
        bound = np.sqrt(1.0 / (2 * 9))
        assert np.all(np.abs(params["encoder.0.weight"].data) <= bound)

    def test_from_arrays_round_trip(self, grad_config):
        params = init_parameters(grad_config, seed=1)
        rebuilt = ModelParameters.from_arrays(params.to_arrays(), grad_config)
        for name in params:
            np.testing.assert_array_equal(rebuilt[name].data, params[name].data)
            assert rebuilt[name].requires_grad

    def test_from_arrays_missing(self, grad_config):
        arrays = init_parameters(grad_config).to_arrays()
        del arrays["gate.bias"]
        with pytest.raises(ConfigurationError):
            ModelParameters.from_arrays(arrays, grad_config)

    def test_from_arrays_wrong_shape(self, grad_config):
        arrays = init_parameters(grad_config).to_arrays()
        arrays["gate.bias"] = np.zeros(5)
        with pytest.raises(ConfigurationError):
            ModelParameters.from_arrays(arrays, grad_config)


class TestBuildingBlocks:

    def test_encoder_shape(self, grad_config, rng):
        params = init_parameters(grad_config)
        out = encode_spatial(Tensor(rng.normal(size=(2, 2, 5, 7))), params, grad_config)
        assert out.shape == (2, 3, 5, 7)

    def test_encoder_channel_mismatch(self, grad_config, rng):
        params = init_parameters(grad_config)
        with pytest.raises(ShapeError):
            encode_spatial(Tensor(rng.normal(size=(1, 3, 4, 4))), params, grad_config)

    def test_height_features_replicated(self, grad_config):
        params = init_parameters(grad_config)
        out = height_features(params, B=2, W=5)
        assert out.shape == (2, 4, 5, 3)
        table = params["height.embedding"].data[0]
        np.testing.assert_array_equal(out.data[1, :, 4, :], table)

    def test_fuse_adds_column(self, grad_config, rng):
        params = init_parameters(grad_config)
        spatial = Tensor(rng.normal(size=(1, 3, 2, 5)))
        volume = fuse(spatial, height_features(params, 1, 5))
        assert volume.shape == (1, 3, 4, 2, 5)
        table = params["height.embedding"].data[0]
        expected = spatial.data[0, 1, 1, 2] + table[3, 1]
        assert volume.data[0, 1, 3, 1, 2] == pytest.approx(expected)

    def test_fuse_width_mismatch(self, grad_config, rng):
        params = init_parameters(grad_config)
        with pytest.raises(ShapeError):
            fuse(Tensor(rng.normal(size=(1, 3, 2, 5))), height_features(params, 1, 4))

    def test_generator_depth_check(self, grad_config, rng):
        params = init_parameters(grad_config)
        with pytest.raises(ShapeError):
            multiscale_generate(Tensor(rng.normal(size=(1, 3, 5, 4, 4))), params, grad_config)


class TestForward:

    @pytest.mark.parametrize("architecture", ["sgmagnet", "baseline"])
    def test_output_is_distribution(self, grad_config, rng, architecture):
        config = ModelConfig.from_mapping({**grad_config.to_mapping(), "architecture": architecture})
        params = init_parameters(config)
        with no_grad():
            P = run_model(Tensor(rng.normal(size=(2, 2, 6, 6))), params, config)
        assert P.shape == (2, 4, 4, 6, 6)
        assert np.all(P.data >= 0.0)
        np.testing.assert_allclose(P.data.sum(axis=1), 1.0, atol=1e-12)

    def test_batch_permutation(self, grad_config, rng):
        params = init_parameters(grad_config)
        X = rng.normal(size=(3, 2, 6, 6))
        with no_grad():
            P = run_model(Tensor(X), params, grad_config).data
            Q = run_model(Tensor(X[[2, 0, 1]]), params, grad_config).data
        np.testing.assert_allclose(Q, P[[2, 0, 1]], rtol=1e-12, atol=1e-15)

    def test_batch_items_independent(self, grad_config, rng):
        params = init_parameters(grad_config)
        X = rng.normal(size=(2, 2, 6, 6))
        with no_grad():
            both = run_model(Tensor(X), params, grad_config).data
            single = run_model(Tensor(X[1:]), params, grad_config).data
        np.testing.assert_allclose(both[1:], single, rtol=1e-12, atol=1e-15)

    def test_translation_equivariance_at_unit_scale(self, grad_config, rng):
        config = ModelConfig.from_mapping({**grad_config.to_mapping(), "scales": ["1"]})
        params = init_parameters(config, seed=2)
        X = rng.normal(size=(1, 2, 6, 16))
        shifted = np.roll(X, 1, axis=3)
        with no_grad():
            P = run_model(Tensor(X), params, config).data
            Q = run_model(Tensor(shifted), params, config).data
        # receptive field radius is 4 columns (two 2D convs, two 3D convs)
        np.testing.assert_allclose(Q[..., 5:12], P[..., 4:11], rtol=1e-10, atol=1e-13)

    def test_non_divisible_size(self, grad_config, rng):
        params = init_parameters(grad_config)
        with no_grad():
            P = run_model(Tensor(rng.normal(size=(1, 2, 7, 5))), params, grad_config)
        assert P.shape == (1, 4, 4, 7, 5)

    @pytest.mark.slow
    def test_full_size(self):
        config = ModelConfig()
        params = init_parameters(config, seed=0)
        X = np.random.default_rng(0).normal(size=(4, 20, 128, 128))
        with no_grad():
            P = run_model(Tensor(X), params, config)
        assert P.shape == (4, 4, 38, 128, 128)
        np.testing.assert_allclose(P.data.sum(axis=1), 1.0, atol=1e-9)
