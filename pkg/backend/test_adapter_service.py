"""
Unit tests for the adapter service: domain adapters on the frozen
tokenizer, item routing and fused semantic IDs.
"""

import json

import numpy as np
import pytest
import torch

from adapter_service import (
    adapter_name,
    assign_fused_sids,
    dump_embeddings,
    fuse_latents,
    reconstruction_error,
    route_item,
    train_adapter,
    train_adapters,
    train_router,
    write_routing_report,
)
from errors import AdapterLookupError, InputError
from nn_core import DTYPE, parameter_hash
from records import ItemRecord
from tokenizer_service import PretrainConfig, build_rqvae, items_matrix, pretrain

ADAPTER_CONFIG = {'rank': 2, 'alpha': 4.0, 'dropout': 0.0, 'epochs': 15, 'lr': 1e-2, 'batch': 16}
ROUTER_CONFIG = {'hidden': 8, 'latent_dim': 3, 'epochs': 3, 'lr': 1e-2, 'batch': 16, 'vib_weight': 1e-3}


def _catalog(seed=0):
    """Two domains whose embeddings are shifted copies of shared structure."""
    rng = np.random.default_rng(seed)
    items = []
    for d, shift in (('A', 0.0), ('B', 3.0)):
        for i in range(24):
            items.append(ItemRecord(f"{d}{i:03d}", d, rng.normal(size=6) + shift))
    return items


def _pretrained():
    config = PretrainConfig(
        levels=2, codebook_size=4, latent_dim=4, hidden_dim=8, hidden_layers=1,
        ctx_dim=8, ctx_layers=1, ctx_heads=2, epochs=10, lr=1e-2, batch=16,
    )
    model, _ = pretrain(_catalog(), config, seed=2)
    return model


@pytest.fixture(scope='module')
def tokenizer():
    return _pretrained()


@pytest.fixture(scope='module')
def adapted(tokenizer):
    train_adapters(_catalog(), tokenizer, ADAPTER_CONFIG, seed=2)
    return tokenizer


class TestFuseLatents:
    """Test the convex fusion of latents."""

    def test_boundaries(self):
        z_uni = torch.tensor([1.0, 2.0])
        z_spec = torch.tensor([3.0, -1.0])
        assert torch.equal(fuse_latents(z_uni, z_spec, 0.0).z_fused, z_uni)
        assert torch.equal(fuse_latents(z_uni, z_spec, 1.0).z_fused, z_spec)

    def test_batched_alpha(self):
        z_uni = torch.zeros(2, 3)
        z_spec = torch.ones(2, 3)
        fused = fuse_latents(z_uni, z_spec, torch.tensor([0.25, 0.5]))
        assert torch.allclose(fused.z_fused[:, 0], torch.tensor([0.25, 0.5]))


class TestTrainAdapter:
    """Test per-domain adapter training."""

    def test_base_weights_untouched(self, tokenizer):
        before = parameter_hash(tokenizer, include=lambda n: '.adapters.' not in n)
        items = [item for item in _catalog() if item.domain == 'A']
        train_adapter('A', items, tokenizer, dict(ADAPTER_CONFIG, epochs=2), seed=9)
        assert parameter_hash(tokenizer, include=lambda n: '.adapters.' not in n) == before

    def test_fresh_adapter_starts_at_universal(self):
        """Test that a zero-initialized adapter reproduces the universal encoder."""
        items = [item for item in _catalog() if item.domain == 'B']
        _, history = train_adapter('B', items, _pretrained(), dict(ADAPTER_CONFIG, epochs=1), seed=4)
        assert history[0]['loss'] == history[0]['universal']
        assert len(history) == 2

    def test_history_starts_at_universal_baseline(self, tokenizer):
        items = [item for item in _catalog() if item.domain == 'A']
        _, history = train_adapter('A', items, tokenizer, dict(ADAPTER_CONFIG, epochs=1), seed=9)
        assert history[0]['epoch'] == 0
        assert 'universal' in history[-1]

    def test_adapter_frozen_afterwards(self, adapted):
        params = [p for n, p in adapted.named_parameters() if adapter_name('A') in n]
        assert params and not any(p.requires_grad for p in params)

    def test_requires_frozen_tokenizer(self):
        model = build_rqvae(6, PretrainConfig(levels=2, codebook_size=4, latent_dim=4, hidden_dim=8), seed=0)
        with pytest.raises(InputError):
            train_adapter('A', _catalog()[:3], model, ADAPTER_CONFIG, seed=0)

    def test_empty_domain(self, tokenizer):
        with pytest.raises(InputError):
            train_adapter('C', [], tokenizer, ADAPTER_CONFIG, seed=0)

    def test_foreign_items(self, tokenizer):
        with pytest.raises(InputError):
            train_adapter('A', _catalog()[-3:], tokenizer, ADAPTER_CONFIG, seed=0)


class TestRouting:
    """Test routing, router training and fused SIDs."""

    @pytest.fixture(scope='class')
    def router(self, adapted):
        router, history = train_router(_catalog(), adapted, ROUTER_CONFIG, seed=2)
        assert len(history) == ROUTER_CONFIG['epochs']
        return router

    def test_router_is_frozen_eval(self, router):
        assert not router.training
        assert not any(p.requires_grad for p in router.parameters())

    def test_route_item_is_convex(self, adapted, router):
        x = torch.as_tensor(_catalog()[0].embedding, dtype=DTYPE)
        fused = route_item(x, 'A', adapted, router)
        alpha = float(fused.alpha)
        assert 0.0 <= alpha <= 1.0
        assert torch.allclose(fused.z_fused, (1 - alpha) * fused.z_uni + alpha * fused.z_spec)

    def test_eval_routing_is_deterministic(self, adapted, router):
        x = items_matrix(_catalog()[:5])
        first = route_item(x, 'A', adapted, router)
        second = route_item(x, 'A', adapted, router)
        assert torch.equal(first.z_fused, second.z_fused)

    def test_missing_adapter(self, adapted, router):
        x = torch.zeros(6, dtype=DTYPE)
        with pytest.raises(AdapterLookupError):
            route_item(x, 'Z', adapted, router)

    def test_fused_sids_total_and_injective(self, adapted, router):
        items = _catalog()
        sid_map, routed = assign_fused_sids(items, adapted, router)
        assert set(sid_map) == set(routed) == {item.item_id for item in items}
        assert len(set(sid_map.values())) == len(items)

    def test_reports(self, adapted, router, tmp_path):
        items = _catalog()
        _, routed = assign_fused_sids(items, adapted, router)
        write_routing_report(tmp_path / 'routing.tsv', items, routed)
        rows = (tmp_path / 'routing.tsv').read_text().splitlines()
        assert len(rows) == len(items)
        assert rows[0].split('\t')[:2] == ['A000', 'A']
        dump_embeddings(tmp_path / 'embeddings.jsonl', items, routed)
        first = json.loads((tmp_path / 'embeddings.jsonl').read_text().splitlines()[0])
        assert set(first) == {'item_id', 'domain', 'alpha', 'z_uni', 'z_spec', 'z_fused'}
        assert len(first['z_fused']) == 4
