import dataclasses

import numpy as np
import pytest

from viewforge.core import (
    DEFAULT_EVAL_VIEWS,
    InvalidFieldError,
    PipelineConfig,
    Scene,
    ValidationError,
    ViewSpec,
    config_hash,
    load_image,
    parse_config_text,
    parse_views,
    quantize_u8,
    resize_image,
    save_image,
    seeded_rng,
    serialize_config,
    u8_to_float,
    validate_config,
    wrap_azimuth,
)


class TestViewSpec:
    def test_azimuth_wraps_into_range(self):
        assert ViewSpec(0, 370).azimuth_deg == 10
        assert ViewSpec(0, -30).azimuth_deg == 330
        assert ViewSpec(0, 360).azimuth_deg == 0

    def test_azimuth_normalization_total(self):
        rng = seeded_rng(0, "azi-prop")
        for _ in range(500):
            azi = float(rng.uniform(-1e6, 1e6))
            assert 0.0 <= wrap_azimuth(azi) < 360.0

    def test_elevation_range_enforced(self):
        with pytest.raises(InvalidFieldError):
            ViewSpec(120, 0)
        with pytest.raises(InvalidFieldError):
            ViewSpec(-91, 0)
        ViewSpec(90, 0)
        ViewSpec(-90, 0)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidFieldError):
            ViewSpec(float("nan"), 0)
        with pytest.raises(InvalidFieldError):
            ViewSpec(0, float("inf"))

    def test_key_is_path_safe(self):
        assert ViewSpec(30, 270).key() == "30_270"
        assert ViewSpec(-20, 210).key() == "-20_210"


class TestScene:
    def test_valid_scene(self):
        img = seeded_rng(0, "scene").random((64, 64, 3))
        s = Scene(image=img, caption="  a cat  ", scene_id="x")
        assert s.caption == "a cat"
        assert not s.image.flags.writeable

    def test_small_image_rejected(self):
        with pytest.raises(InvalidFieldError):
            Scene(image=np.zeros((32, 64, 3)), caption="a", scene_id="x")

    def test_out_of_range_values_rejected(self):
        img = np.full((64, 64, 3), 1.5)
        with pytest.raises(InvalidFieldError):
            Scene(image=img, caption="a", scene_id="x")

    def test_empty_caption_rejected(self):
        img = np.zeros((64, 64, 3))
        with pytest.raises(InvalidFieldError):
            Scene(image=img, caption="   ", scene_id="x")


class TestConfig:
    def test_defaults_echo_back(self):
        cfg = PipelineConfig()
        assert validate_config(cfg) == cfg

    def test_mi_bins_zero_rejected(self):
        with pytest.raises(InvalidFieldError) as err:
            validate_config(dataclasses.replace(PipelineConfig(), mi_bins=0))
        assert "mi_bins" in str(err.value)

    def test_bad_learning_rate_names_field(self):
        with pytest.raises(InvalidFieldError) as err:
            validate_config(dataclasses.replace(PipelineConfig(), embed_lr=-1.0))
        assert "embed_lr" in str(err.value)

    def test_view_preset_azimuth_370_normalizes_to_10(self):
        views = parse_views("30,370")
        assert views[0].azimuth_deg == 10.0

    def test_default_views_are_the_four(self):
        assert [v.key() for v in DEFAULT_EVAL_VIEWS] == \
            ["30_30", "-20_210", "30_270", "-20_330"]

    def test_serialize_parse_round_trip(self):
        cfg = dataclasses.replace(
            PipelineConfig(), seed=11, mi_weight=0.25, sampler_steps=7,
            views=parse_views("30,30;-20,210"), snap_to_supported_views=False,
            captioner_timeout_s=5.0, captioner_retries=4)
        text = serialize_config(cfg)
        assert parse_config_text(text) == cfg

    def test_unknown_key_is_error(self):
        with pytest.raises(InvalidFieldError) as err:
            parse_config_text("bogus_key = 1\n")
        assert "bogus_key" in str(err.value)

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config_text("# hello\n\nseed = 5\n")
        assert cfg.seed == 5

    def test_partial_override_keeps_defaults(self):
        cfg = parse_config_text("sampler_steps = 3\n")
        assert cfg.sampler_steps == 3
        assert cfg.image_size == PipelineConfig().image_size

    def test_bad_value_type_is_error(self):
        with pytest.raises(InvalidFieldError):
            parse_config_text("seed = notanint\n")

    def test_config_hash_stable_and_sensitive(self):
        cfg = PipelineConfig()
        assert config_hash(cfg) == config_hash(PipelineConfig())
        assert config_hash(cfg) != config_hash(dataclasses.replace(cfg, seed=1))


class TestSeededRng:
    def test_same_pair_identical_streams(self):
        a = seeded_rng(7, "sampler").random(100)
        b = seeded_rng(7, "sampler").random(100)
        assert np.array_equal(a, b)

    def test_labels_separate_streams(self):
        a = seeded_rng(7, "sampler").random(8)
        b = seeded_rng(7, "optim").random(8)
        assert not np.array_equal(a, b)

    def test_seeds_separate_streams(self):
        a = seeded_rng(7, "x").random(8)
        b = seeded_rng(8, "x").random(8)
        assert not np.array_equal(a, b)


class TestImageIo:
    def test_png_round_trip_exact_on_u8_grid(self, tmp_path):
        img = u8_to_float(quantize_u8(seeded_rng(0, "io").random((40, 40, 3))))
        path = tmp_path / "x.png"
        save_image(img, path)
        assert np.array_equal(load_image(path), img)

    def test_missing_image_raises_validation_error(self, tmp_path):
        with pytest.raises(ValidationError):
            load_image(tmp_path / "nope.png")

    def test_resize_shape_and_range(self):
        img = seeded_rng(0, "rs").random((50, 50, 3))
        out = resize_image(img, 64)
        assert out.shape == (64, 64, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0
