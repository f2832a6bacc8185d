"""
Unit tests for configuration module.

Tests configuration loading, validation, hashing and accessor methods.
"""

import os
import pytest
from unittest.mock import patch
from config import Config, ConfigurationError

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'config')


class TestConfigLoading:
    """Test loading from files and the environment."""

    def test_defaults_are_valid(self):
        """Test that the schema defaults pass validation."""
        try:
            Config().validate()
        except ConfigurationError:
            pytest.fail("Default configuration should not raise ConfigurationError")

    def test_reference_file_matches_defaults(self):
        """Test that config/xdrec.conf restates the schema defaults."""
        with patch.dict(os.environ, {}, clear=True):
            loaded = Config.load(os.path.join(CONFIG_DIR, 'xdrec.conf'))
        assert loaded.as_dict() == Config().as_dict()

    def test_desk_file_loads(self):
        """Test that the desk overrides load and validate."""
        with patch.dict(os.environ, {}, clear=True):
            config = Config.load(os.path.join(CONFIG_DIR, 'desk.conf'))
        assert config.RQ_CODEBOOK_SIZE == 32
        assert config.REC_LR == 3e-3

    def test_missing_file(self):
        """Test that a missing configuration file raises ConfigurationError."""
        with pytest.raises(ConfigurationError) as exc_info:
            Config.load('/nonexistent/xdrec.conf')
        assert "not found" in str(exc_info.value)

    def test_environment_override(self):
        """Test that XDREC_ variables override file values."""
        with patch.dict(os.environ, {'XDREC_SEED': '11', 'XDREC_EVAL_KS': '1,5'}, clear=False):
            config = Config.load()
        assert config.SEED == 11
        assert config.EVAL_KS == [1, 5]

    def test_explicit_overrides_win(self):
        """Test that overrides passed to load() beat the environment."""
        with patch.dict(os.environ, {'XDREC_SEED': '11'}, clear=False):
            config = Config.load(overrides={'SEED': '3'})
        assert config.SEED == 3

    def test_unparseable_value(self):
        """Test that a non-numeric integer raises ConfigurationError."""
        with pytest.raises(ConfigurationError) as exc_info:
            Config({'SEED': 'seven'})
        assert "SEED" in str(exc_info.value)

    def test_bool_parsing(self):
        assert Config({'USE_SYNTH': 'false'}).USE_SYNTH is False
        assert Config({'USE_SYNTH': 'yes'}).USE_SYNTH is True


class TestConfigValidation:
    """Test configuration validation."""

    def test_collects_every_error(self):
        """Test that all problems are reported in one ConfigurationError."""
        config = Config({'RQ_LR': '0', 'REC_GATE_MODE': 'median'})
        with pytest.raises(ConfigurationError) as exc_info:
            config.validate()
        message = str(exc_info.value)
        assert "RQ_LR" in message
        assert "REC_GATE_MODE" in message

    def test_unknown_ablation(self):
        with pytest.raises(ConfigurationError) as exc_info:
            Config({'ABLATION': 'no_everything'}).validate()
        assert "ABLATION" in str(exc_info.value)

    def test_decode_k_covers_eval_cutoffs(self):
        with pytest.raises(ConfigurationError) as exc_info:
            Config({'DECODE_K': '5', 'EVAL_KS': '5,10'}).validate()
        assert "DECODE_K" in str(exc_info.value)

    def test_beam_narrower_than_k(self):
        with pytest.raises(ConfigurationError) as exc_info:
            Config({'DECODE_BEAM': '4'}).validate()
        assert "DECODE_BEAM" in str(exc_info.value)

    def test_real_data_needs_paths(self):
        with pytest.raises(ConfigurationError) as exc_info:
            Config({'USE_SYNTH': 'false'}).validate()
        assert "ITEMS_PATH" in str(exc_info.value)

    def test_mask_rate_range(self):
        with pytest.raises(ConfigurationError):
            Config({'RQ_MASK_RATE': '1.0'}).validate()

    def test_head_divisibility(self):
        with pytest.raises(ConfigurationError) as exc_info:
            Config({'REC_D_MODEL': '30', 'REC_HEADS': '4'}).validate()
        assert "REC_HEADS" in str(exc_info.value)

    def test_scaling_sizes_positive(self):
        with pytest.raises(ConfigurationError) as exc_info:
            Config({'SCALING_SIZES': '10,0'}).validate()
        assert "SCALING_SIZES" in str(exc_info.value)


class TestConfigHash:
    """Test stage hashing."""

    def test_hash_is_stable(self):
        assert Config().config_hash() == Config().config_hash()

    def test_hash_depends_only_on_selected_keys(self):
        base = Config()
        changed = base.with_overrides(REC_LR=1e-3)
        assert base.config_hash(['RQ_LR']) == changed.config_hash(['RQ_LR'])
        assert base.config_hash(['REC_LR']) != changed.config_hash(['REC_LR'])

    def test_hash_chains_upstream(self):
        config = Config()
        assert config.config_hash(['SEED'], upstream=['a']) != config.config_hash(['SEED'], upstream=['b'])

    def test_numeric_overrides_hash_like_parsed_values(self):
        """Test that an int override of a float key hashes like the parsed string."""
        assert Config({'REC_EXPERT_ALPHA': 64}).config_hash(['REC_EXPERT_ALPHA']) == \
            Config({'REC_EXPERT_ALPHA': '64'}).config_hash(['REC_EXPERT_ALPHA'])

    def test_with_overrides_validates(self):
        with pytest.raises(ConfigurationError):
            Config().with_overrides(REC_EXPERTS=0)


class TestConfigAccessors:
    """Test configuration accessor methods."""

    def test_default_mask_rate(self):
        assert Config().mask_rate == pytest.approx(1.0 / 3)
        assert Config({'RQ_LEVELS': '1'}).mask_rate == 0.5
        assert Config({'RQ_MASK_RATE': '0.4'}).mask_rate == 0.4

    def test_default_beam_width(self):
        assert Config().beam_width == 20
        assert Config({'DECODE_K': '15', 'EVAL_KS': '5,10'}).beam_width == 30
        assert Config({'DECODE_BEAM': '50'}).beam_width == 50

    def test_no_mtm_zeroes_lambda(self):
        assert Config().get_pretrain_config()['lam'] == 0.1
        assert Config({'ABLATION': 'no_mtm'}).get_pretrain_config()['lam'] == 0.0

    def test_avg_gate_overrides_gate_mode(self):
        assert Config({'ABLATION': 'avg_gate'}).get_recommender_config()['gate_mode'] == 'average'

    def test_prefix_tree_ablation_unconstrains_decoding(self):
        assert Config().get_decoder_config()['constrained'] is True
        assert Config({'ABLATION': 'no_prefix_tree'}).get_decoder_config()['constrained'] is False

    def test_get_serve_config(self):
        serve = Config({'ALLOWED_ORIGINS': 'http://a.test, http://b.test'}).get_serve_config()
        assert serve['origins'] == ['http://a.test', 'http://b.test']
        assert serve['port'] == 5000

    def test_is_production(self):
        assert Config({'ENV': 'production'}).is_production() is True
        assert Config({'ENV': 'production'}).is_development() is False

    def test_is_development(self):
        assert Config().is_development() is True
        assert Config().is_production() is False
