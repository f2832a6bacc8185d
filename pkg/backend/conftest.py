"""
Shared pytest setup: backend imports and the smoke-scale pipeline fixtures.
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import Config  # noqa: E402
from experiment_service import Pipeline  # noqa: E402


TINY_CONF = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'config', 'tiny.conf')


def load_tiny_config(artifact_dir, **overrides):
    """Smoke-scale configuration writing into artifact_dir."""
    values = {'ARTIFACT_DIR': str(artifact_dir), 'LOG_FILE': os.path.join(str(artifact_dir), 'xdrec.log')}
    values.update(overrides)
    return Config.load(TINY_CONF, overrides=values)


@pytest.fixture(scope='session')
def tiny_run(tmp_path_factory):
    """Every stage of the smoke-scale pipeline, run once per session."""
    config = load_tiny_config(tmp_path_factory.mktemp('artifacts'))
    pipeline = Pipeline(config)
    results = pipeline.run_all()
    failed = [r for r in results if not r['success']]
    assert not failed, failed
    return config, pipeline


@pytest.fixture
def tiny_config(tmp_path):
    """Smoke-scale configuration with a fresh artifact directory."""
    return load_tiny_config(tmp_path / 'artifacts')
