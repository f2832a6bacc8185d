"""
Configuration module for the xdrec pipeline.

This module loads and validates the key-value configuration files that
drive every pipeline stage, providing centralized configuration
management for training, decoding, evaluation and serving.

Configuration files use ``KEY=VALUE`` lines (the ``.env`` syntax) and are
parsed with python-dotenv. Any key can be overridden from the environment
with a ``XDREC_`` prefix, e.g. ``XDREC_SEED=11``.
"""

import os
import hashlib
import logging
from dotenv import load_dotenv, dotenv_values

# Load environment variables from .env file
load_dotenv()

# Configure logging
logger = logging.getLogger(__name__)

ENV_PREFIX = 'XDREC_'


class ConfigurationError(Exception):
    """Exception raised for configuration errors."""
    pass


def _parse_bool(raw):
    return str(raw).strip().lower() in ('1', 'true', 'yes', 'on')


def _parse_int_list(raw):
    return [int(part) for part in str(raw).split(',') if part.strip()]


def _parse_float_list(raw):
    return [float(part) for part in str(raw).split(',') if part.strip()]


def _parse_optional_int(raw):
    raw = str(raw).strip()
    return int(raw) if raw else None


def _parse_optional_float(raw):
    raw = str(raw).strip()
    return float(raw) if raw else None


# key -> (parser, default). Defaults are the reference-scale settings;
# desk-scale overrides live in config/desk.conf.
SCHEMA = {
    # Run
    'ENV': (str, 'development'),
    'LOG_LEVEL': (str, ''),
    'LOG_FILE': (str, 'xdrec.log'),
    'SEED': (int, 7),
    'ARTIFACT_DIR': (str, 'artifacts'),
    'DATA_DIR': (str, 'data'),
    'ITEMS_PATH': (str, ''),
    'INTERACTIONS_PATH': (str, ''),
    'USE_SYNTH': (_parse_bool, True),
    'ABLATION': (str, 'none'),

    # Synthetic data
    'SYNTH_DOMAINS': (int, 2),
    'SYNTH_USERS': (int, 800),
    'SYNTH_ITEMS_PER_DOMAIN': (int, 1000),
    'SYNTH_CONCEPTS': (int, 20),
    'SYNTH_SHARED_FRACTION': (float, 0.4),
    'SYNTH_DOMAIN_SHIFT': (float, 1.0),
    'SYNTH_EMBEDDING_DIM': (int, 32),
    'SYNTH_NOISE': (float, 0.1),
    'SYNTH_MIN_LEN': (int, 8),
    'SYNTH_MAX_LEN': (int, 24),
    'SYNTH_CROSS_USER_FRACTION': (float, 0.5),
    'SYNTH_TRANSITION_STRENGTH': (float, 0.8),
    'SYNTH_POPULARITY_EXPONENT': (float, 1.0),

    # Tokenizer pretraining
    'RQ_LEVELS': (int, 3),
    'RQ_CODEBOOK_SIZE': (int, 256),
    'RQ_LATENT_DIM': (int, 32),
    'RQ_HIDDEN_DIM': (int, 128),
    'RQ_HIDDEN_LAYERS': (int, 2),
    'RQ_BETA': (float, 0.25),
    'RQ_MU': (float, 1.0),
    'RQ_LAMBDA': (float, 0.1),
    'RQ_MASK_RATE': (_parse_optional_float, None),
    'RQ_EPOCHS': (int, 100),
    'RQ_LR': (float, 1e-4),
    'RQ_BATCH': (int, 512),
    'RQ_WEIGHT_DECAY': (float, 0.0),
    'RQ_CTX_DIM': (int, 32),
    'RQ_CTX_LAYERS': (int, 2),
    'RQ_CTX_HEADS': (int, 4),

    # Item adapters
    'ADAPTER_RANK': (int, 64),
    'ADAPTER_ALPHA': (float, 32.0),
    'ADAPTER_DROPOUT': (float, 0.05),
    'ADAPTER_EPOCHS': (int, 50),
    'ADAPTER_LR': (float, 5e-5),
    'ADAPTER_BATCH': (int, 512),

    # Item router
    'ROUTER_HIDDEN': (int, 128),
    'ROUTER_LATENT_DIM': (int, 16),
    'ROUTER_EPOCHS': (int, 50),
    'ROUTER_LR': (float, 5e-5),
    'ROUTER_BATCH': (int, 512),
    'VIB_WEIGHT': (float, 1e-3),

    # Recommender
    'REC_LAYERS': (int, 2),
    'REC_D_MODEL': (int, 64),
    'REC_HEADS': (int, 4),
    'REC_FF_DIM': (int, 256),
    'REC_MAX_LEN': (int, 256),
    'REC_TAG_ITEMS': (_parse_bool, True),
    'REC_LORA_TARGETS': (str, 'all'),
    'REC_EXPERTS': (int, 4),
    'REC_EXPERT_RANK': (int, 64),
    'REC_EXPERT_ALPHA': (float, 128.0),
    'REC_EXPERT_DROPOUT': (float, 0.05),
    'REC_GATE_MODE': (str, 'prefix_mean'),
    'REC_UNIVERSAL_EPOCHS': (int, 10),
    'REC_SPECIFIC_EPOCHS': (int, 10),
    'REC_SPECIFIC_RANK': (int, 64),
    'REC_SPECIFIC_ALPHA': (float, 128.0),
    'REC_LR': (float, 5e-5),
    'REC_BATCH': (int, 8),
    'REC_WEIGHT_DECAY': (float, 0.01),
    'USER_ROUTER_EPOCHS': (int, 20),
    'USER_ROUTER_LR': (float, 1e-3),
    'USER_ROUTER_BATCH': (int, 64),

    # Decoding and evaluation
    'DECODE_K': (int, 10),
    'DECODE_BEAM': (_parse_optional_int, None),
    'FUSION_ORDER': (str, 'mask_then_fuse'),
    'EVAL_KS': (_parse_int_list, [5, 10]),
    'EVAL_WORKERS': (int, 1),
    'SELECT_BEST': (_parse_bool, True),
    'SELECTION_USERS': (int, 100),

    # Gradient checking
    'GRADCHECK_EPSILON': (float, 1e-5),
    'GRADCHECK_TOLERANCE': (float, 1e-4),

    # Sweeps
    'SWEEP_EXPERTS': (_parse_int_list, [1, 2, 4, 8]),
    'SWEEP_RANKS': (_parse_int_list, [8, 16, 32, 64]),
    'SWEEP_ALPHAS': (_parse_float_list, [32.0, 64.0, 128.0, 256.0]),
    'SWEEP_DROPOUTS': (_parse_float_list, [0.0, 0.05, 0.1, 0.2]),

    # Decode-cost scaling report
    'SCALING_SIZES': (_parse_int_list, [1000, 4000, 16000]),

    # Serving
    'SERVE_HOST': (str, '127.0.0.1'),
    'SERVE_PORT': (int, 5000),
    'ALLOWED_ORIGINS': (str, '*'),
}

GATE_MODES = ('prefix_mean', 'token', 'average')
FUSION_ORDERS = ('mask_then_fuse', 'fuse_then_mask')
ABLATIONS = (
    'none', 'no_mtm', 'no_adapter', 'no_specific',
    'no_universal', 'avg_gate', 'no_prefix_tree',
)


def _canonical(value):
    if isinstance(value, list):
        return ','.join(_canonical(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ''
    return str(value)


class Config:
    """
    Pipeline configuration.

    Holds one upper-case attribute per schema key. Instances are built from
    a key-value file (plus ``XDREC_*`` environment overrides) and validated
    before use.
    """

    def __init__(self, values=None, source=None):
        self.source = source
        raw = dict(values or {})
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            logger.warning(f"Ignoring unknown configuration keys: {', '.join(unknown)}")
        errors = []
        for key, (parser, default) in SCHEMA.items():
            value = default
            if key in raw and raw[key] is not None:
                try:
                    if isinstance(raw[key], str) or parser in (int, float):
                        value = parser(raw[key])
                    else:
                        value = raw[key]
                except ValueError:
                    errors.append(f"{key} has unparseable value {raw[key]!r}")
                    continue
            setattr(self, key, value)
        if errors:
            raise ConfigurationError(
                "Configuration parsing failed:\n" + "\n".join(f"  - {error}" for error in errors)
            )

    @classmethod
    def load(cls, path=None, overrides=None, validate=True):
        """
        Load configuration from a key-value file and the environment.

        Args:
            path (str, optional): Configuration file; defaults only when omitted
            overrides (dict, optional): Values that win over file and environment
            validate (bool): Run validate() before returning

        Returns:
            Config: The loaded configuration

        Raises:
            ConfigurationError: If the file is missing or values are invalid
        """
        values = {}
        if path:
            if not os.path.exists(path):
                raise ConfigurationError(f"Configuration file not found: {path}")
            values.update({k: v for k, v in dotenv_values(path).items() if v is not None})
        for key in SCHEMA:
            env_value = os.getenv(f'{ENV_PREFIX}{key}')
            if env_value is not None:
                values[key] = env_value
        values.update(overrides or {})
        config = cls(values, source=path)
        if validate:
            config.validate()
        return config

    def with_overrides(self, **overrides):
        """Return a validated copy with some values replaced."""
        values = self.as_dict()
        values.update(overrides)
        config = Config(values, source=self.source)
        config.validate()
        return config

    def as_dict(self):
        return {key: getattr(self, key) for key in SCHEMA}

    def validate(self):
        """
        Validate that all configuration values are usable together.

        Raises:
            ConfigurationError: If any value is missing or invalid
        """
        errors = []

        positive_ints = [
            'SYNTH_DOMAINS', 'SYNTH_USERS', 'SYNTH_ITEMS_PER_DOMAIN', 'SYNTH_CONCEPTS',
            'SYNTH_EMBEDDING_DIM', 'RQ_LEVELS', 'RQ_LATENT_DIM', 'RQ_HIDDEN_DIM',
            'RQ_EPOCHS', 'RQ_BATCH', 'RQ_CTX_DIM', 'RQ_CTX_LAYERS', 'RQ_CTX_HEADS',
            'ADAPTER_RANK', 'ADAPTER_EPOCHS', 'ADAPTER_BATCH', 'ROUTER_HIDDEN',
            'ROUTER_LATENT_DIM', 'ROUTER_EPOCHS', 'ROUTER_BATCH', 'REC_LAYERS',
            'REC_D_MODEL', 'REC_HEADS', 'REC_FF_DIM', 'REC_MAX_LEN', 'REC_EXPERTS',
            'REC_EXPERT_RANK', 'REC_UNIVERSAL_EPOCHS', 'REC_SPECIFIC_EPOCHS',
            'REC_SPECIFIC_RANK', 'REC_BATCH', 'USER_ROUTER_EPOCHS', 'USER_ROUTER_BATCH',
            'DECODE_K', 'EVAL_WORKERS', 'SELECTION_USERS',
        ]
        for key in positive_ints:
            if getattr(self, key) <= 0:
                errors.append(f"{key} must be a positive integer")

        positive_floats = [
            'RQ_LR', 'ADAPTER_LR', 'ROUTER_LR', 'REC_LR', 'USER_ROUTER_LR',
            'ADAPTER_ALPHA', 'REC_EXPERT_ALPHA', 'REC_SPECIFIC_ALPHA',
        ]
        for key in positive_floats:
            if getattr(self, key) <= 0:
                errors.append(f"{key} must be positive")

        for key in ('RQ_BETA', 'RQ_MU', 'RQ_LAMBDA', 'VIB_WEIGHT', 'SYNTH_DOMAIN_SHIFT',
                    'SYNTH_NOISE', 'RQ_WEIGHT_DECAY', 'REC_WEIGHT_DECAY'):
            if getattr(self, key) < 0:
                errors.append(f"{key} must be non-negative")

        for key in ('ADAPTER_DROPOUT', 'REC_EXPERT_DROPOUT', 'SYNTH_SHARED_FRACTION',
                    'SYNTH_CROSS_USER_FRACTION', 'SYNTH_TRANSITION_STRENGTH'):
            if not (0.0 <= getattr(self, key) <= 1.0):
                errors.append(f"{key} must be in [0, 1]")

        if self.RQ_CODEBOOK_SIZE < 2:
            errors.append("RQ_CODEBOOK_SIZE must be at least 2")
        if self.RQ_MASK_RATE is not None and not (0.0 < self.RQ_MASK_RATE < 1.0):
            errors.append("RQ_MASK_RATE must be in (0, 1)")
        if self.RQ_CTX_DIM % self.RQ_CTX_HEADS:
            errors.append("RQ_CTX_DIM must be divisible by RQ_CTX_HEADS")
        if self.REC_D_MODEL % self.REC_HEADS:
            errors.append("REC_D_MODEL must be divisible by REC_HEADS")
        if self.REC_MAX_LEN < self.RQ_LEVELS + 3:
            errors.append("REC_MAX_LEN must be at least RQ_LEVELS + 3")
        if self.SYNTH_MIN_LEN < 3 or self.SYNTH_MAX_LEN < self.SYNTH_MIN_LEN:
            errors.append("SYNTH_MIN_LEN must be >= 3 and <= SYNTH_MAX_LEN")
        if self.REC_GATE_MODE not in GATE_MODES:
            errors.append(f"REC_GATE_MODE must be one of {', '.join(GATE_MODES)}")
        if self.FUSION_ORDER not in FUSION_ORDERS:
            errors.append(f"FUSION_ORDER must be one of {', '.join(FUSION_ORDERS)}")
        if self.ABLATION not in ABLATIONS:
            errors.append(f"ABLATION must be one of {', '.join(ABLATIONS)}")
        if self.DECODE_BEAM is not None and self.DECODE_BEAM < self.DECODE_K:
            errors.append("DECODE_BEAM must be at least DECODE_K")
        if not self.EVAL_KS or any(k < 1 for k in self.EVAL_KS):
            errors.append("EVAL_KS must list positive cutoffs")
        elif max(self.EVAL_KS) > self.DECODE_K:
            errors.append("DECODE_K must cover the largest EVAL_KS cutoff")
        if not (0 < self.GRADCHECK_EPSILON <= 1e-2):
            errors.append("GRADCHECK_EPSILON must be in (0, 1e-2]")
        if not self.SCALING_SIZES or any(size < 1 for size in self.SCALING_SIZES):
            errors.append("SCALING_SIZES must list positive catalog sizes")
        if not self.USE_SYNTH and not (self.ITEMS_PATH and self.INTERACTIONS_PATH):
            errors.append("ITEMS_PATH and INTERACTIONS_PATH are required when USE_SYNTH is false")
        if not (1 <= self.SERVE_PORT <= 65535):
            errors.append("SERVE_PORT must be between 1 and 65535")

        if errors:
            error_message = "Configuration validation failed:\n" + "\n".join(f"  - {error}" for error in errors)
            logger.error(error_message)
            raise ConfigurationError(error_message)

        logger.debug("Configuration validation successful")

    def config_hash(self, keys=None, upstream=()):
        """
        Hash a subset of configuration values plus upstream hashes.

        Args:
            keys (iterable, optional): Keys to include; all keys when omitted
            upstream (iterable): Hashes of stages this one depends on

        Returns:
            str: Hex SHA-256 digest
        """
        keys = sorted(keys if keys is not None else SCHEMA)
        lines = [f"{key}={_canonical(getattr(self, key))}" for key in keys]
        lines.extend(f"upstream={h}" for h in upstream)
        return hashlib.sha256("\n".join(lines).encode('utf-8')).hexdigest()

    @property
    def mask_rate(self):
        if self.RQ_MASK_RATE is not None:
            return self.RQ_MASK_RATE
        return 1.0 / self.RQ_LEVELS if self.RQ_LEVELS > 1 else 0.5

    @property
    def beam_width(self):
        return self.DECODE_BEAM if self.DECODE_BEAM is not None else max(2 * self.DECODE_K, 20)

    def get_synth_config(self):
        """
        Get synthetic data generation settings.

        Returns:
            dict: Keyword arguments for data_service.SynthConfig
        """
        return {
            'domains': self.SYNTH_DOMAINS,
            'users': self.SYNTH_USERS,
            'items_per_domain': self.SYNTH_ITEMS_PER_DOMAIN,
            'concepts': self.SYNTH_CONCEPTS,
            'shared_fraction': self.SYNTH_SHARED_FRACTION,
            'domain_shift': self.SYNTH_DOMAIN_SHIFT,
            'embedding_dim': self.SYNTH_EMBEDDING_DIM,
            'noise': self.SYNTH_NOISE,
            'min_len': self.SYNTH_MIN_LEN,
            'max_len': self.SYNTH_MAX_LEN,
            'cross_user_fraction': self.SYNTH_CROSS_USER_FRACTION,
            'transition_strength': self.SYNTH_TRANSITION_STRENGTH,
            'popularity_exponent': self.SYNTH_POPULARITY_EXPONENT,
            'seed': self.SEED,
        }

    def get_pretrain_config(self):
        """
        Get tokenizer pretraining settings.

        Returns:
            dict: Keyword arguments for tokenizer_service.PretrainConfig
        """
        return {
            'levels': self.RQ_LEVELS,
            'codebook_size': self.RQ_CODEBOOK_SIZE,
            'latent_dim': self.RQ_LATENT_DIM,
            'hidden_dim': self.RQ_HIDDEN_DIM,
            'hidden_layers': self.RQ_HIDDEN_LAYERS,
            'mu': self.RQ_MU,
            # no_mtm drops the masked-code term
            'lam': 0.0 if self.ABLATION == 'no_mtm' else self.RQ_LAMBDA,
            'beta': self.RQ_BETA,
            'mask_rate': self.mask_rate,
            'epochs': self.RQ_EPOCHS,
            'lr': self.RQ_LR,
            'batch': self.RQ_BATCH,
            'weight_decay': self.RQ_WEIGHT_DECAY,
            'ctx_dim': self.RQ_CTX_DIM,
            'ctx_layers': self.RQ_CTX_LAYERS,
            'ctx_heads': self.RQ_CTX_HEADS,
        }

    def get_adapter_config(self):
        """Get item-adapter training settings."""
        return {
            'rank': self.ADAPTER_RANK,
            'alpha': self.ADAPTER_ALPHA,
            'dropout': self.ADAPTER_DROPOUT,
            'epochs': self.ADAPTER_EPOCHS,
            'lr': self.ADAPTER_LR,
            'batch': self.ADAPTER_BATCH,
        }

    def get_router_config(self):
        """Get item-router training settings."""
        return {
            'hidden': self.ROUTER_HIDDEN,
            'latent_dim': self.ROUTER_LATENT_DIM,
            'epochs': self.ROUTER_EPOCHS,
            'lr': self.ROUTER_LR,
            'batch': self.ROUTER_BATCH,
            'vib_weight': self.VIB_WEIGHT,
        }

    def get_recommender_config(self):
        """
        Get recommender architecture and training settings.

        Returns:
            dict: Keyword arguments for recommender_service.RecConfig
        """
        return {
            'layers': self.REC_LAYERS,
            'd_model': self.REC_D_MODEL,
            'heads': self.REC_HEADS,
            'ff_dim': self.REC_FF_DIM,
            'max_len': self.REC_MAX_LEN,
            'tag_items': self.REC_TAG_ITEMS,
            'lora_targets': self.REC_LORA_TARGETS,
            'experts': self.REC_EXPERTS,
            'expert_rank': self.REC_EXPERT_RANK,
            'expert_alpha': self.REC_EXPERT_ALPHA,
            'expert_dropout': self.REC_EXPERT_DROPOUT,
            'gate_mode': 'average' if self.ABLATION == 'avg_gate' else self.REC_GATE_MODE,
            'universal_epochs': self.REC_UNIVERSAL_EPOCHS,
            'specific_epochs': self.REC_SPECIFIC_EPOCHS,
            'specific_rank': self.REC_SPECIFIC_RANK,
            'specific_alpha': self.REC_SPECIFIC_ALPHA,
            'lr': self.REC_LR,
            'batch': self.REC_BATCH,
            'weight_decay': self.REC_WEIGHT_DECAY,
            'router_hidden': self.ROUTER_HIDDEN,
            'router_latent_dim': self.ROUTER_LATENT_DIM,
            'router_epochs': self.USER_ROUTER_EPOCHS,
            'router_lr': self.USER_ROUTER_LR,
            'router_batch': self.USER_ROUTER_BATCH,
            'vib_weight': self.VIB_WEIGHT,
            'fusion_order': self.FUSION_ORDER,
        }

    def get_decoder_config(self):
        """Get beam decoding settings."""
        return {
            'k': self.DECODE_K,
            'beam_width': self.beam_width,
            'fusion_order': self.FUSION_ORDER,
            'constrained': self.ABLATION != 'no_prefix_tree',
        }

    def get_eval_config(self):
        """Get evaluation settings."""
        return {
            'ks': list(self.EVAL_KS),
            'workers': self.EVAL_WORKERS,
            'select_best': self.SELECT_BEST,
            'selection_users': self.SELECTION_USERS,
        }

    def get_serve_config(self):
        """Get HTTP serving settings."""
        return {
            'host': self.SERVE_HOST,
            'port': self.SERVE_PORT,
            'origins': [o.strip() for o in self.ALLOWED_ORIGINS.split(',') if o.strip()],
        }

    def is_production(self):
        """
        Check if the pipeline is running in production mode.

        Returns:
            bool: True if ENV is 'production', False otherwise
        """
        return self.ENV == 'production'

    def is_development(self):
        """
        Check if the pipeline is running in development mode.

        Returns:
            bool: True if ENV is 'development', False otherwise
        """
        return self.ENV == 'development'
