"""
Unit tests for the semantic-ID tokenizer: residual quantization, losses,
masked code modeling, pretraining and SID assignment.
"""

import numpy as np
import pytest
import torch

from errors import DegenerateContextError, InputError, ShapeError
from nn_core import DTYPE, RngSeed, parameter_hash
from records import ItemRecord, SemanticID
from tokenizer_service import (
    CodeContextModel,
    PretrainConfig,
    assign_sids,
    build_rqvae,
    dedup_codes,
    items_matrix,
    mtm_loss,
    pretrain,
    quantization_error,
    read_sids_tsv,
    residual_quantize,
    rq_losses,
    sample_mask,
    straight_through,
    write_sids_tsv,
)

TINY = dict(
    levels=2, codebook_size=4, latent_dim=4, hidden_dim=8, hidden_layers=1,
    ctx_dim=8, ctx_layers=1, ctx_heads=2, epochs=30, lr=1e-2, batch=16,
)


def _items(n=40, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    return [ItemRecord(f"A{i:03d}", 'A' if i % 2 else 'B', rng.normal(size=dim)) for i in range(n)]


def _greedy_oracle(z, codebooks):
    """Level-by-level exhaustive nearest neighbor with lowest-index ties."""
    codes = []
    residual = z.copy()
    for entries in codebooks:
        distances = ((residual[None, :] - entries) ** 2).sum(axis=1)
        best = int(np.argmin(distances))
        codes.append(best)
        residual = residual - entries[best]
    return codes


class TestResidualQuantize:
    """Test greedy residual quantization."""

    def test_matches_exhaustive_oracle(self):
        """Test 1,000 random latents against the per-level nearest-neighbor oracle."""
        rng = np.random.default_rng(3)
        mismatches = 0
        for trial in range(10):
            levels = int(rng.integers(1, 5))
            size = int(rng.integers(2, 33))
            dim = int(rng.integers(1, 9))
            codebooks = [rng.normal(size=(size, dim)) for _ in range(levels)]
            z = rng.normal(size=(100, dim))
            codes, _, _ = residual_quantize(torch.as_tensor(z), [torch.as_tensor(c) for c in codebooks])
            for row in range(100):
                if codes[row].tolist() != _greedy_oracle(z[row], codebooks):
                    mismatches += 1
        assert mismatches == 0

    def test_z_hat_is_sum_of_chosen_entries(self):
        codebooks = [torch.tensor([[0.0, 0.0], [1.0, 1.0]]), torch.tensor([[0.1, 0.0], [0.0, 0.1]])]
        codes, z_hat, residuals = residual_quantize(torch.tensor([1.2, 1.0]), codebooks)
        assert codes.tolist() == [1, 0]
        assert torch.allclose(z_hat, torch.tensor([1.1, 1.0]))
        assert torch.allclose(residuals[1], torch.tensor([0.2, 0.0]))

    def test_ties_go_to_lowest_index(self):
        codebooks = [torch.tensor([[1.0], [-1.0]])]
        codes, _, _ = residual_quantize(torch.tensor([[0.0]]), codebooks)
        assert codes.tolist() == [[0]]

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            residual_quantize(torch.zeros(3), [torch.zeros(2, 2)])

    def test_no_codebooks(self):
        with pytest.raises(ShapeError):
            residual_quantize(torch.zeros(3), [])

    def test_exact_codebook_point_has_zero_error(self):
        codebooks = [torch.tensor([[2.0, 0.0], [0.0, 2.0]])]
        assert quantization_error(torch.tensor([[0.0, 2.0]]), codebooks) == 0.0


class TestLosses:
    """Test reconstruction, quantization and straight-through terms."""

    def test_straight_through_value_and_gradient(self):
        z = torch.tensor([1.0, 2.0], requires_grad=True)
        z_hat = torch.tensor([0.5, 2.5])
        out = straight_through(z, z_hat)
        assert torch.equal(out.detach(), z_hat)
        out.sum().backward()
        assert torch.equal(z.grad, torch.ones(2))

    def test_rq_losses_hand_example(self):
        """Test L_REC and L_Q on a one-level, one-dimensional case."""
        entries = torch.tensor([[1.0], [3.0]])
        residuals = [torch.tensor([[1.5]])]
        codes = torch.tensor([[0]])
        l_rec, l_q = rq_losses(torch.tensor([2.0]), torch.tensor([1.0]), residuals, codes, [entries], beta=0.25)
        assert float(l_rec) == 1.0
        # (1.5 - 1)^2 * (1 + beta)
        assert float(l_q) == pytest.approx(0.3125)

    def test_codebook_term_skips_encoder(self):
        entries = torch.tensor([[1.0]], requires_grad=True)
        residual = torch.tensor([[1.5]], requires_grad=True)
        _, l_q = rq_losses(torch.zeros(1), torch.zeros(1), [residual], torch.tensor([[0]]), [entries], beta=0.0)
        l_q.backward()
        assert float(residual.grad) == 0.0
        assert float(entries.grad) == pytest.approx(-1.0)

    def test_reconstruction_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rq_losses(torch.zeros(3), torch.zeros(2), [], torch.zeros(1, 0, dtype=torch.long), [], 0.25)


class TestMaskedCodeModeling:
    """Test the masked-code objective."""

    def _ctx(self):
        return CodeContextModel(3, 4, 8, 1, 2, generator=RngSeed(0, 'ctx').generator())

    def _codebooks(self):
        generator = RngSeed(0, 'cb').generator()
        return [torch.randn(5, 4, generator=generator, dtype=DTYPE) for _ in range(3)]

    def test_loss_is_positive_and_finite(self):
        codes = torch.tensor([[0, 1, 2], [4, 3, 2]])
        loss = mtm_loss(codes, [1], self._ctx(), self._codebooks())
        assert torch.isfinite(loss) and float(loss) > 0

    def test_single_level_is_degenerate(self):
        ctx = CodeContextModel(1, 4, 8, 1, 2)
        with pytest.raises(DegenerateContextError):
            mtm_loss(torch.tensor([[0]]), [0], ctx, [torch.zeros(5, 4)])

    def test_nothing_masked(self):
        mask = torch.zeros(1, 3, dtype=torch.bool)
        with pytest.raises(InputError):
            mtm_loss(torch.tensor([[0, 1, 2]]), mask, self._ctx(), self._codebooks())

    def test_position_out_of_range(self):
        with pytest.raises(InputError):
            mtm_loss(torch.tensor([[0, 1, 2]]), [3], self._ctx(), self._codebooks())

    def test_masked_code_does_not_leak(self):
        """Test that the prediction at a masked slot ignores the hidden code."""
        ctx = self._ctx()
        ctx.eval()
        codebooks = self._codebooks()
        mask = torch.tensor([[False, True, False]])
        a = ctx(torch.tensor([[0, 1, 2]]), mask, codebooks)[1]
        b = ctx(torch.tensor([[0, 4, 2]]), mask, codebooks)[1]
        assert torch.equal(a, b)

    def test_sample_mask_keeps_context(self):
        mask = sample_mask(200, 3, 0.9, RngSeed(0, 'm').generator())
        assert mask.any(dim=1).all()
        assert (~mask).any(dim=1).all()


class TestPretrainConfig:

    def test_default_mask_rate(self):
        assert PretrainConfig(levels=4).mask_rate == 0.25
        assert PretrainConfig(levels=1).mask_rate == 0.5

    def test_negative_weight(self):
        with pytest.raises(InputError):
            PretrainConfig(lam=-0.1)

    def test_tiny_codebook(self):
        with pytest.raises(InputError):
            PretrainConfig(codebook_size=1)


class TestPretrain:
    """Test joint tokenizer pretraining."""

    def test_loss_decreases_and_model_freezes(self):
        model, history = pretrain(_items(), PretrainConfig(**TINY), seed=1)
        assert history[0]['epoch'] == 0
        assert len(history) == TINY['epochs'] + 1
        assert history[-1]['l_rec'] < history[0]['l_rec']
        assert model.frozen
        assert not any(p.requires_grad for p in model.parameters())

    def test_same_seed_same_model(self):
        first, _ = pretrain(_items(), PretrainConfig(**dict(TINY, epochs=3)), seed=5)
        second, _ = pretrain(_items(), PretrainConfig(**dict(TINY, epochs=3)), seed=5)
        assert parameter_hash(first) == parameter_hash(second)

    def test_single_level_skips_masked_codes(self):
        config = PretrainConfig(**dict(TINY, levels=1, epochs=2))
        _, history = pretrain(_items(), config, seed=1)
        assert all(record['l_mtm'] == 0.0 for record in history)

    def test_empty_catalog(self):
        with pytest.raises(InputError):
            items_matrix([])

    def test_mixed_dimensions(self):
        items = [ItemRecord('a', 'A', np.zeros(3)), ItemRecord('b', 'A', np.zeros(4))]
        with pytest.raises(ShapeError):
            items_matrix(items)


class TestSemanticIds:
    """Test SID assignment and deduplication."""

    def test_dedup_by_ascending_item_id(self):
        sid_map = dedup_codes({'b': (1, 2), 'a': (1, 2), 'c': (0, 0), 'd': (1, 2)})
        assert sid_map['a'] == SemanticID((1, 2), 0)
        assert sid_map['b'] == SemanticID((1, 2), 1)
        assert sid_map['d'] == SemanticID((1, 2), 2)
        assert sid_map['c'].dedup == 0

    def test_assign_is_total_and_injective(self):
        items = _items()
        model, _ = pretrain(items, PretrainConfig(**dict(TINY, epochs=2)), seed=1)
        sid_map = assign_sids(items, model)
        assert set(sid_map) == {item.item_id for item in items}
        assert len(set(sid_map.values())) == len(items)

    def test_requires_frozen_tokenizer(self):
        model = build_rqvae(6, PretrainConfig(**TINY), seed=0)
        with pytest.raises(InputError):
            assign_sids(_items(), model)

    def test_tsv_round_trip(self, tmp_path):
        sid_map = {'x': SemanticID((3, 1, 4), 0), 'y': SemanticID((3, 1, 4), 1)}
        path = tmp_path / 'sids.tsv'
        write_sids_tsv(path, sid_map)
        assert read_sids_tsv(path) == sid_map
        assert path.read_text().splitlines()[0] == 'x\t3\t1\t4\t0'

    def test_sid_string(self):
        assert str(SemanticID((5, 2, 7), 0)) == '5,2,7|0'
        assert SemanticID((5, 2, 7), 1).as_path() == (5, 2, 7, 1)
