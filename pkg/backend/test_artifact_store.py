"""
Unit tests for checkpoint archives and the stage artifact store.
"""

import zipfile

import numpy as np
import pytest
import torch

import artifact_store
from artifact_store import (
    ArtifactStore,
    close_store,
    get_store,
    initialize_store,
    is_store_initialized,
    load_archive,
    load_module,
    save_archive,
    save_module,
)
from errors import DependencyError, ParseError, StaleArtifactError
from nn_core import DTYPE, attach_adapter, freeze_module, parameter_hash
from router import VibRouter, build_router


class TestArchives:
    """Test zip archives of named arrays."""

    def test_round_trip(self, tmp_path):
        arrays = {'w': np.arange(6, dtype=np.float32).reshape(2, 3), 'codes': np.array([3, 1, 4])}
        save_archive(tmp_path / 'a.npz', arrays, {'note': 'x'})
        loaded, manifest = load_archive(tmp_path / 'a.npz')
        assert loaded['w'].dtype == np.dtype('<f8')
        assert np.array_equal(loaded['w'], arrays['w'])
        assert loaded['codes'].dtype == np.dtype('<i8')
        assert manifest['note'] == 'x'
        assert manifest['arrays'] == ['codes', 'w']

    def test_equal_inputs_equal_bytes(self, tmp_path):
        arrays = {'b': np.ones(3), 'a': np.zeros(2)}
        save_archive(tmp_path / 'one.npz', arrays, {})
        save_archive(tmp_path / 'two.npz', dict(reversed(list(arrays.items()))), {})
        assert (tmp_path / 'one.npz').read_bytes() == (tmp_path / 'two.npz').read_bytes()

    def test_not_a_zip(self, tmp_path):
        path = tmp_path / 'bad.npz'
        path.write_bytes(b'not an archive')
        with pytest.raises(ParseError):
            load_archive(path)

    def test_foreign_manifest(self, tmp_path):
        path = tmp_path / 'foreign.zip'
        with zipfile.ZipFile(path, 'w') as archive:
            archive.writestr('manifest.json', '{"format": "other"}')
        with pytest.raises(ParseError):
            load_archive(path)


class TestModuleCheckpoints:
    """Test saving and restoring modules with adapters."""

    def test_router_with_adapter(self, tmp_path):
        router = build_router(5, 8, 3, seed=1, label='ckpt')
        attach_adapter(router, 'extra', 2, 4.0)
        with torch.no_grad():
            router.trunk1.adapters['extra'].B.normal_()
        freeze_module(router)
        router.trunk1.adapters['extra'].B.requires_grad_(True)
        save_module(tmp_path / 'router.npz', router, router.spec(), history=[{'epoch': 1}])

        loaded, manifest = load_module(tmp_path / 'router.npz', lambda spec: VibRouter(**spec))
        assert parameter_hash(loaded) == parameter_hash(router)
        assert manifest['history'] == [{'epoch': 1}]
        assert loaded.trunk1.adapters['extra'].B.requires_grad
        assert not loaded.trunk1.weight.requires_grad
        assert loaded.trunk1.frozen
        x = torch.randn(2, 5, dtype=DTYPE)
        router.eval()
        assert torch.equal(loaded(x)[0], router(x)[0])


class TestArtifactStore:
    """Test stage directories and upstream checks."""

    def test_complete_and_require(self, tmp_path):
        store = ArtifactStore(str(tmp_path))
        store.stage_dir('data', 'h1', create=True)
        assert not store.is_complete('data', 'h1')
        store.complete('data', 'h1', {'items': 3})
        assert store.require('data', 'h1') == store.stage_dir('data', 'h1')
        assert store.manifest('data', 'h1')['items'] == 3

    def test_missing_upstream(self, tmp_path):
        with pytest.raises(DependencyError) as exc_info:
            ArtifactStore(str(tmp_path)).require('rq-pretrain', 'h1')
        assert exc_info.value.stage == 'rq-pretrain'

    def test_stale_upstream(self, tmp_path):
        store = ArtifactStore(str(tmp_path))
        store.stage_dir('data', 'old', create=True)
        store.complete('data', 'old', {})
        with pytest.raises(StaleArtifactError):
            store.require('data', 'new')

    def test_incomplete_directory_is_not_stale(self, tmp_path):
        store = ArtifactStore(str(tmp_path))
        store.stage_dir('data', 'partial', create=True)
        assert store.completed_hashes('data') == []
        with pytest.raises(DependencyError):
            store.require('data', 'new')


class TestProcessStore:
    """Test the process-wide store helpers."""

    def teardown_method(self):
        close_store()

    def test_get_before_initialize(self):
        close_store()
        with pytest.raises(RuntimeError):
            get_store()

    def test_initialize_is_idempotent(self, tmp_path):
        first = initialize_store(str(tmp_path))
        assert initialize_store(str(tmp_path)) is first
        assert get_store() is first
        assert is_store_initialized()

    def test_close(self, tmp_path):
        initialize_store(str(tmp_path))
        close_store()
        assert artifact_store._store is None
