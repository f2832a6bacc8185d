"""
Opt-in slow marker for the whole suite.

Tests marked ``@pytest.mark.slow`` run the desk-scale pipeline and are
skipped unless XDREC_RUN_SLOW=1.
"""

import os

import pytest


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale runs, enabled with XDREC_RUN_SLOW=1')


def pytest_collection_modifyitems(config, items):
    if os.getenv('XDREC_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason='set XDREC_RUN_SLOW=1 to run desk-scale tests')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)
