"""
Unit tests for ingestion, the interaction log, leave-last-out splitting
and the synthetic dataset generator.
"""

import json
import os

import numpy as np
import pytest

from data_service import (
    InteractionLog,
    SynthConfig,
    ingest,
    load_items,
    load_labels,
    split_leave_last_out,
    synth_generate,
)
from errors import InputError, ParseError, ReferentialError
from records import InteractionEvent

SMALL_SYNTH = dict(domains=2, users=30, items_per_domain=40, concepts=6, embedding_dim=8, min_len=4, max_len=8)


def _write_lines(path, records):
    with open(path, 'w', encoding='utf-8') as handle:
        for record in records:
            handle.write((record if isinstance(record, str) else json.dumps(record)) + '\n')
    return str(path)


def _items_file(tmp_path):
    return _write_lines(tmp_path / 'items.jsonl', [
        {'item_id': 'a1', 'domain': 'A', 'embedding': [0.0, 1.0]},
        {'item_id': 'b1', 'domain': 'B', 'embedding': [1.0, 0.0]},
        {'item_id': 'b2', 'domain': 'B', 'embedding': [1.0, 1.0]},
    ])


def _event(user, ts, item, domain, line):
    return InteractionEvent(user, ts, item, domain, line)


class TestLoadItems:
    """Test catalog parsing."""

    def test_valid_catalog(self, tmp_path):
        items = load_items(_items_file(tmp_path))
        assert [item.item_id for item in items] == ['a1', 'b1', 'b2']
        assert items[0].embedding.dtype == np.float64

    def test_invalid_json_reports_line(self, tmp_path):
        path = _write_lines(tmp_path / 'items.jsonl', [
            {'item_id': 'a1', 'domain': 'A', 'embedding': [0.0]}, '{not json',
        ])
        with pytest.raises(ParseError) as exc_info:
            load_items(path)
        assert exc_info.value.context['line'] == 2

    def test_missing_field(self, tmp_path):
        path = _write_lines(tmp_path / 'items.jsonl', [{'item_id': 'a1', 'embedding': [0.0]}])
        with pytest.raises(ParseError) as exc_info:
            load_items(path)
        assert "'domain'" in str(exc_info.value)

    def test_duplicate_item(self, tmp_path):
        record = {'item_id': 'a1', 'domain': 'A', 'embedding': [0.0]}
        with pytest.raises(ParseError):
            load_items(_write_lines(tmp_path / 'items.jsonl', [record, record]))

    def test_mixed_dimensions(self, tmp_path):
        path = _write_lines(tmp_path / 'items.jsonl', [
            {'item_id': 'a1', 'domain': 'A', 'embedding': [0.0]},
            {'item_id': 'a2', 'domain': 'A', 'embedding': [0.0, 1.0]},
        ])
        with pytest.raises(ParseError):
            load_items(path)

    def test_non_numeric_embedding(self, tmp_path):
        path = _write_lines(tmp_path / 'items.jsonl', [{'item_id': 'a1', 'domain': 'A', 'embedding': ['x']}])
        with pytest.raises(ParseError):
            load_items(path)


class TestIngest:
    """Test interaction ingestion and canonical ordering."""

    def test_canonical_order(self, tmp_path):
        interactions = _write_lines(tmp_path / 'interactions.jsonl', [
            {'user_id': 'u2', 'item_id': 'a1', 'domain': 'A', 'ts': 5},
            {'user_id': 'u1', 'item_id': 'b1', 'domain': 'B', 'ts': 9},
            {'user_id': 'u1', 'item_id': 'b2', 'domain': 'B', 'ts': 3},
            {'user_id': 'u1', 'item_id': 'a1', 'domain': 'A', 'ts': 3},
        ])
        catalog, log = ingest(_items_file(tmp_path), interactions)
        assert set(catalog) == {'a1', 'b1', 'b2'}
        assert log.users() == ['u1', 'u2']
        assert [e.item_id for e in log.user_events('u1')] == ['b2', 'a1', 'b1']
        assert [e.item_id for e in log.sequence('u1', 'B')] == ['b2', 'b1']
        assert log.domains() == ['A', 'B']

    def test_unknown_item(self, tmp_path):
        interactions = _write_lines(tmp_path / 'interactions.jsonl', [
            {'user_id': 'u1', 'item_id': 'a1', 'domain': 'A', 'ts': 1},
            {'user_id': 'u1', 'item_id': 'zz', 'domain': 'A', 'ts': 2},
        ])
        with pytest.raises(ReferentialError) as exc_info:
            ingest(_items_file(tmp_path), interactions)
        assert exc_info.value.context['line'] == 2

    def test_domain_mismatch(self, tmp_path):
        interactions = _write_lines(tmp_path / 'interactions.jsonl', [
            {'user_id': 'u1', 'item_id': 'a1', 'domain': 'B', 'ts': 1},
        ])
        with pytest.raises(ReferentialError):
            ingest(_items_file(tmp_path), interactions)

    def test_timestamp_must_be_integer(self, tmp_path):
        interactions = _write_lines(tmp_path / 'interactions.jsonl', [
            {'user_id': 'u1', 'item_id': 'a1', 'domain': 'A', 'ts': 'noon'},
        ])
        with pytest.raises(ParseError):
            ingest(_items_file(tmp_path), interactions)


class TestSplit:
    """Test leave-last-out splitting."""

    def _log(self):
        return InteractionLog([
            _event('u1', 1, 'a1', 'A', 1), _event('u1', 2, 'b1', 'B', 2), _event('u1', 3, 'a2', 'A', 3),
            _event('u1', 4, 'a3', 'A', 4), _event('u1', 5, 'b2', 'B', 5), _event('u1', 6, 'a4', 'A', 6),
        ])

    def test_last_two_held_out(self):
        split = split_leave_last_out(self._log())
        a = split.splits[('u1', 'A')]
        assert [e.item_id for e in a.train] == ['a1', 'a2']
        assert a.validation.item_id == 'a3'
        assert a.test.item_id == 'a4'

    def test_short_sequence_excluded(self):
        split = split_leave_last_out(self._log())
        assert split.excluded == [('u1', 'B')]
        assert split.excluded_count('B') == 1
        assert split.excluded_count('A') == 0
        assert split.splits[('u1', 'B')].test is None
        assert [s.domain for s in split.targets('test')] == ['A']

    def test_validation_context_is_strictly_earlier(self):
        split = split_leave_last_out(self._log())
        target = split.splits[('u1', 'A')].validation
        context = split.validation_context('u1', target)
        assert [e.item_id for e in context] == ['a1', 'b1', 'a2']

    def test_test_context_includes_validation_events(self):
        split = split_leave_last_out(self._log())
        target = split.splits[('u1', 'A')].test
        context = split.test_context('u1', target)
        assert [e.item_id for e in context] == ['a1', 'b1', 'a2', 'a3', 'b2']

    def test_same_timestamp_ordered_by_line(self):
        log = InteractionLog([
            _event('u', 1, 'x3', 'A', 3), _event('u', 1, 'x1', 'A', 1), _event('u', 1, 'x2', 'A', 2),
        ])
        split = split_leave_last_out(log)
        assert split.splits[('u', 'A')].test.item_id == 'x3'


class TestSynth:
    """Test the synthetic dataset generator."""

    def test_same_seed_same_dataset(self):
        first = synth_generate(SynthConfig(**SMALL_SYNTH))
        second = synth_generate(SynthConfig(**SMALL_SYNTH))
        assert [e.item_id for e in first[1]] == [e.item_id for e in second[1]]
        assert all(np.array_equal(a.embedding, b.embedding) for a, b in zip(first[0], second[0]))

    def test_events_reference_catalog(self):
        items, events, labels = synth_generate(SynthConfig(**SMALL_SYNTH))
        domains = {item.item_id: item.domain for item in items}
        assert len(items) == 80
        assert all(domains[e.item_id] == e.domain for e in events)
        assert len({e.user_id for e in events}) == 30
        assert set(labels['user_types'].values()) <= {'cross', 'specialist'}

    def test_shared_concepts_span_domains(self):
        items, _, labels = synth_generate(SynthConfig(**SMALL_SYNTH))
        shared = set(labels['shared_concepts'])
        assert shared
        for domain in ('A', 'B'):
            concepts = {labels['item_concepts'][i.item_id] for i in items if i.domain == domain}
            assert shared <= concepts

    def test_written_files_ingest(self, tmp_path):
        synth_generate(SynthConfig(**SMALL_SYNTH), out_dir=str(tmp_path))
        catalog, log = ingest(os.path.join(tmp_path, 'items.jsonl'), os.path.join(tmp_path, 'interactions.jsonl'))
        assert len(catalog) == 80
        assert log.domains() == ['A', 'B']
        assert load_labels(os.path.join(tmp_path, 'labels.json'))['seed'] == 7
        assert load_labels(os.path.join(tmp_path, 'missing.json')) is None

    @pytest.mark.parametrize('overrides', [
        {'shared_fraction': 1.5}, {'concepts': 1}, {'min_len': 5, 'max_len': 4}, {'items_per_domain': 3},
    ])
    def test_invalid_config(self, overrides):
        with pytest.raises(InputError):
            SynthConfig(**dict(SMALL_SYNTH, **overrides))
