"""
Artifact store module for the xdrec pipeline.

This module provides checkpoint archives (named little-endian .npy arrays
plus a JSON manifest inside one zip file) and the stage artifact store that
keys every stage's outputs by its configuration hash.

Layout:
    <root>/<stage>/<stage_hash>/stage.json    completion manifest
    <root>/<stage>/<stage_hash>/...           stage outputs
"""

import io
import json
import logging
import os
import zipfile

import numpy as np
import torch

from errors import DependencyError, ParseError, StaleArtifactError
from nn_core import lora_layers

# Configure logging
logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = 'xdrec-archive'
ARCHIVE_VERSION = 1
STAGE_MANIFEST = 'stage.json'
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)

# Process-wide store
_store = None


def _to_numpy(value):
    array = np.asarray(value)
    if array.dtype.kind == 'f':
        return array.astype('<f8')
    if array.dtype.kind in 'iu':
        return array.astype('<i8')
    return array


def _write_entry(archive, name, data):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    archive.writestr(info, data)


def save_archive(path, arrays, manifest):
    """
    Write named arrays and a manifest into one zip archive.

    Entry order and timestamps are fixed, so equal inputs give equal bytes.
    """
    header = dict(manifest)
    header.update({'format': ARCHIVE_FORMAT, 'version': ARCHIVE_VERSION, 'arrays': sorted(arrays)})
    with zipfile.ZipFile(path, 'w') as archive:
        _write_entry(archive, 'manifest.json', json.dumps(header, sort_keys=True, indent=2))
        for name in sorted(arrays):
            buffer = io.BytesIO()
            np.save(buffer, _to_numpy(arrays[name]), allow_pickle=False)
            _write_entry(archive, f"{name}.npy", buffer.getvalue())


def load_archive(path):
    """
    Returns:
        tuple: (dict name -> ndarray, manifest dict)

    Raises:
        ParseError: If the file is not an archive of this format
    """
    try:
        with zipfile.ZipFile(path, 'r') as archive:
            manifest = json.loads(archive.read('manifest.json'))
            if manifest.get('format') != ARCHIVE_FORMAT:
                raise ParseError(f"{path} is not a {ARCHIVE_FORMAT} file")
            if manifest.get('version') != ARCHIVE_VERSION:
                raise ParseError(f"{path} has unsupported archive version {manifest.get('version')}")
            arrays = {
                name: np.load(io.BytesIO(archive.read(f"{name}.npy")), allow_pickle=False)
                for name in manifest['arrays']
            }
    except (zipfile.BadZipFile, KeyError, ValueError) as e:
        logger.error(f"Failed to read archive {path}: {e}")
        raise ParseError(f"Corrupt archive {path}: {e}")
    return arrays, manifest


def adapter_manifest(module):
    """Every attached adapter: layer, name, rank, alpha and dropout."""
    entries = []
    for layer_name, layer in lora_layers(module):
        for name, adapter in layer.adapters.items():
            entries.append({
                'layer': layer_name,
                'name': name,
                'rank': adapter.rank,
                'alpha': adapter.alpha,
                'dropout': adapter.dropout.p,
            })
    return entries


def restore_adapters(module, entries):
    """Re-attach adapters recorded by adapter_manifest that are not present yet."""
    layers = dict(lora_layers(module))
    for entry in entries:
        layer = layers[entry['layer']]
        if entry['name'] not in layer.adapters:
            layer.add_adapter(entry['name'], entry['rank'], entry['alpha'], entry['dropout'])


def save_module(path, module, spec, **extra):
    """
    Checkpoint a module: its state, adapters, trainable flags and frozen layers.

    Args:
        path (str): Archive path
        module (nn.Module): Module to save
        spec (dict): Constructor arguments used to rebuild it
        **extra: Further manifest fields (histories, provenance)
    """
    arrays = {name: t.detach().cpu().numpy() for name, t in module.state_dict().items()}
    manifest = {
        'spec': spec,
        'adapters': adapter_manifest(module),
        'trainable': sorted(n for n, p in module.named_parameters() if p.requires_grad),
        'frozen_layers': sorted(n for n, layer in lora_layers(module) if layer.frozen),
        'frozen': bool(getattr(module, 'frozen', False)),
    }
    manifest.update(extra)
    save_archive(path, arrays, manifest)
    logger.info(f"Saved checkpoint {path} ({len(arrays)} tensors)")


def load_module(path, build):
    """
    Rebuild a module from a checkpoint.

    Args:
        path (str): Archive path
        build (callable): spec dict -> freshly constructed module

    Returns:
        tuple: (module, manifest)
    """
    arrays, manifest = load_archive(path)
    module = build(manifest['spec'])
    restore_adapters(module, manifest['adapters'])
    module.load_state_dict({name: torch.from_numpy(array.copy()) for name, array in arrays.items()}, strict=True)
    trainable = set(manifest['trainable'])
    for name, p in module.named_parameters():
        p.requires_grad_(name in trainable)
    frozen_layers = set(manifest['frozen_layers'])
    for name, layer in lora_layers(module):
        layer.frozen = name in frozen_layers
    if hasattr(module, 'frozen'):
        module.frozen = manifest['frozen']
    module.eval()
    return module, manifest


def write_json(path, data):
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(data, handle, sort_keys=True, indent=2)
        handle.write('\n')


def read_json(path):
    with open(path, 'r', encoding='utf-8') as handle:
        return json.load(handle)


class ArtifactStore:
    """Stage outputs on disk, one directory per (stage, config hash)."""

    def __init__(self, root):
        self.root = root
        os.makedirs(root, exist_ok=True)

    def stage_dir(self, stage, stage_hash, create=False):
        path = os.path.join(self.root, stage, stage_hash)
        if create:
            os.makedirs(path, exist_ok=True)
        return path

    def path(self, stage, stage_hash, name):
        return os.path.join(self.stage_dir(stage, stage_hash), name)

    def is_complete(self, stage, stage_hash):
        return os.path.exists(self.path(stage, stage_hash, STAGE_MANIFEST))

    def complete(self, stage, stage_hash, info):
        """Mark a stage complete by writing its manifest last."""
        manifest = {'stage': stage, 'hash': stage_hash}
        manifest.update(info)
        write_json(self.path(stage, stage_hash, STAGE_MANIFEST), manifest)
        return manifest

    def manifest(self, stage, stage_hash):
        return read_json(self.path(stage, stage_hash, STAGE_MANIFEST))

    def completed_hashes(self, stage):
        base = os.path.join(self.root, stage)
        if not os.path.isdir(base):
            return []
        return sorted(h for h in os.listdir(base) if self.is_complete(stage, h))

    def require(self, stage, stage_hash):
        """
        Ensure an upstream stage's artifacts exist for the expected hash.

        Raises:
            StaleArtifactError: If the stage only exists under other hashes
            DependencyError: If the stage never completed
        """
        if self.is_complete(stage, stage_hash):
            return self.stage_dir(stage, stage_hash)
        others = self.completed_hashes(stage)
        if others:
            logger.error(f"Stage {stage} artifacts exist only for other configurations: {others}")
            raise StaleArtifactError(
                f"Stage '{stage}' was produced under a different configuration; rerun it", stage=stage
            )
        logger.error(f"Stage {stage} has not been run")
        raise DependencyError(f"Missing upstream stage '{stage}'; run it first", stage=stage)


def initialize_store(root):
    """
    Initialize the process-wide artifact store.

    Returns:
        ArtifactStore: The store rooted at root
    """
    global _store

    if _store is not None and _store.root == root:
        logger.warning("Artifact store already initialized")
        return _store
    _store = ArtifactStore(root)
    logger.info(f"Artifact store initialized at {root}")
    return _store


def get_store():
    """
    Raises:
        RuntimeError: If initialize_store() has not been called
    """
    if _store is None:
        logger.error("Artifact store not initialized. Call initialize_store() first")
        raise RuntimeError("Artifact store not initialized")
    return _store


def is_store_initialized():
    return _store is not None


def close_store():
    global _store
    _store = None
