"""
Data service module for catalogs and interaction logs.

This module provides:
- JSON-lines ingestion of items and interactions with line-numbered errors
- The canonical interaction log (per-user chronological order)
- Leave-last-out splitting with explicit excluded-sequence accounting
- A planted-structure synthetic cross-domain dataset generator
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from errors import InputError, ParseError, ReferentialError
from nn_core import RngSeed
from records import InteractionEvent, ItemRecord

# Configure logging
logger = logging.getLogger(__name__)


def _read_jsonl(path):
    with open(path, 'r', encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{os.path.basename(path)} line {number}: invalid JSON ({e.msg})", line=number)
            if not isinstance(record, dict):
                raise ParseError(f"{os.path.basename(path)} line {number}: expected an object", line=number)
            yield number, record


def _require(record, key, kinds, path, number):
    value = record.get(key)
    if value is None or not isinstance(value, kinds) or isinstance(value, bool):
        raise ParseError(f"{os.path.basename(path)} line {number}: missing or invalid '{key}'", line=number)
    return value


def load_items(path):
    """
    Parse items.jsonl into ItemRecords in file order.

    Raises:
        ParseError: On malformed lines, duplicate ids or mixed embedding dimensions
    """
    items, seen, dim = [], set(), None
    for number, record in _read_jsonl(path):
        item_id = _require(record, 'item_id', str, path, number)
        domain = _require(record, 'domain', str, path, number)
        embedding = _require(record, 'embedding', list, path, number)
        try:
            vector = np.asarray(embedding, dtype=np.float64)
        except (TypeError, ValueError):
            raise ParseError(f"{os.path.basename(path)} line {number}: embedding is not numeric", line=number)
        if vector.ndim != 1 or not np.isfinite(vector).all():
            raise ParseError(f"{os.path.basename(path)} line {number}: embedding must be a finite vector", line=number)
        if dim is not None and vector.shape[0] != dim:
            raise ParseError(
                f"{os.path.basename(path)} line {number}: embedding has {vector.shape[0]} values, expected {dim}",
                line=number,
            )
        if item_id in seen:
            raise ParseError(f"{os.path.basename(path)} line {number}: duplicate item_id '{item_id}'", line=number)
        dim = vector.shape[0]
        seen.add(item_id)
        items.append(ItemRecord(item_id, domain, vector))
    return items


class InteractionLog:
    """Interaction events in canonical order: by user, then timestamp, then input line."""

    def __init__(self, events):
        self.events = sorted(events, key=lambda e: (e.user_id, e.ts, e.line))
        self._by_user = {}
        for event in self.events:
            self._by_user.setdefault(event.user_id, []).append(event)

    def __len__(self):
        return len(self.events)

    def users(self):
        return sorted(self._by_user)

    def domains(self):
        return sorted({e.domain for e in self.events})

    def user_events(self, user_id):
        return list(self._by_user.get(user_id, []))

    def sequence(self, user_id, domain):
        """The user's chronological sequence in one domain."""
        return [e for e in self._by_user.get(user_id, []) if e.domain == domain]


def ingest(items_path, interactions_path):
    """
    Load the item catalog and the interaction log.

    Returns:
        tuple: (catalog dict item_id -> ItemRecord, InteractionLog)

    Raises:
        ParseError: On a malformed line (carries the line number)
        ReferentialError: On an interaction with an unknown item (carries the line number)
    """
    catalog = {item.item_id: item for item in load_items(items_path)}
    events = []
    for number, record in _read_jsonl(interactions_path):
        user_id = _require(record, 'user_id', str, interactions_path, number)
        item_id = _require(record, 'item_id', str, interactions_path, number)
        domain = _require(record, 'domain', str, interactions_path, number)
        ts = _require(record, 'ts', int, interactions_path, number)
        item = catalog.get(item_id)
        if item is None:
            raise ReferentialError(f"interactions line {number}: unknown item '{item_id}'", line=number)
        if item.domain != domain:
            raise ReferentialError(
                f"interactions line {number}: item '{item_id}' belongs to '{item.domain}', not '{domain}'",
                line=number,
            )
        events.append(InteractionEvent(user_id, ts, item_id, domain, number))
    log = InteractionLog(events)
    logger.info(f"Ingested {len(catalog)} items and {len(log)} interactions from {len(log.users())} users")
    return catalog, log


def _before(event, target):
    return (event.ts, event.line) < (target.ts, target.line)


@dataclass
class DomainSplit:
    """One user's split in one domain."""

    user_id: str
    domain: str
    train: list
    validation: InteractionEvent = None
    test: InteractionEvent = None


@dataclass
class SplitSpec:
    """Leave-last-out splits for every user-domain sequence."""

    splits: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    def train_events(self, user_id):
        """Training-split events of the user across all domains, chronological."""
        events = [e for (u, _), s in self.splits.items() if u == user_id for e in s.train]
        return sorted(events, key=lambda e: (e.ts, e.line))

    def targets(self, kind, domain=None):
        """DomainSplits with a 'validation' or 'test' target, by (user, domain)."""
        return [
            self.splits[key] for key in sorted(self.splits)
            if getattr(self.splits[key], kind) is not None and (domain is None or key[1] == domain)
        ]

    def validation_context(self, user_id, target):
        """Training events of any domain earlier than the validation target."""
        return [e for e in self.train_events(user_id) if _before(e, target)]

    def test_context(self, user_id, target):
        """Training and validation events of any domain earlier than the test target."""
        events = self.train_events(user_id)
        events += [s.validation for (u, _), s in self.splits.items() if u == user_id and s.validation is not None]
        return sorted((e for e in events if _before(e, target)), key=lambda e: (e.ts, e.line))

    def excluded_count(self, domain=None):
        return sum(1 for _, d in self.excluded if domain is None or d == domain)


def split_leave_last_out(log):
    """
    Split each user-domain sequence: train = all but the last two events,
    validation target = second-to-last, test target = last. Sequences
    shorter than 3 keep everything in train and are counted as excluded.
    """
    spec = SplitSpec()
    for user_id in log.users():
        for domain in sorted({e.domain for e in log.user_events(user_id)}):
            sequence = log.sequence(user_id, domain)
            if len(sequence) < 3:
                spec.splits[(user_id, domain)] = DomainSplit(user_id, domain, sequence)
                spec.excluded.append((user_id, domain))
                continue
            spec.splits[(user_id, domain)] = DomainSplit(
                user_id, domain, sequence[:-2], sequence[-2], sequence[-1]
            )
    if spec.excluded:
        logger.warning(f"{len(spec.excluded)} user-domain sequences have fewer than 3 events; no eval target")
    return spec


@dataclass
class SynthConfig:
    """Size and structure of the synthetic cross-domain dataset."""

    domains: int = 2
    users: int = 800
    items_per_domain: int = 1000
    concepts: int = 20
    shared_fraction: float = 0.4
    domain_shift: float = 1.0
    embedding_dim: int = 32
    noise: float = 0.1
    min_len: int = 8
    max_len: int = 24
    cross_user_fraction: float = 0.5
    transition_strength: float = 0.8
    popularity_exponent: float = 1.0
    seed: int = 7

    def __post_init__(self):
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise InputError("shared_fraction must lie in [0, 1]")
        if not 0.0 <= self.cross_user_fraction <= 1.0:
            raise InputError("cross_user_fraction must lie in [0, 1]")
        if self.domains < 1 or self.concepts < self.domains:
            raise InputError("Need at least one domain and one concept per domain")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise InputError("Sequence lengths must satisfy 1 <= min_len <= max_len")
        if self.items_per_domain < self.concepts:
            raise InputError("items_per_domain must be at least the number of concepts")


def domain_names(count):
    return [chr(ord('A') + i) for i in range(count)]


def _zipf(n, exponent):
    weights = 1.0 / np.arange(1, n + 1) ** exponent
    return weights / weights.sum()


def _round(values):
    return [round(float(v), 8) for v in values]


def synth_generate(config, out_dir=None):
    """
    Generate a catalog, interactions and ground-truth labels.

    Shared concepts appear in every domain, shifted by a per-domain offset
    of norm domain_shift; the rest belong to one domain each. Cross-domain
    users walk a global concept chain across domains; specialists walk
    their home domain's own chain and make occasional random visits
    elsewhere.

    Returns:
        tuple: (items, events, labels); files items.jsonl, interactions.jsonl
        and labels.json are written when out_dir is given
    """
    rng = RngSeed(config.seed, 'synth').numpy()
    names = domain_names(config.domains)
    concept_vectors = rng.normal(0.0, 1.0, (config.concepts, config.embedding_dim))
    n_shared = int(round(config.shared_fraction * config.concepts))
    shared = list(range(n_shared))
    domain_concepts = {d: list(shared) for d in names}
    for offset, concept in enumerate(range(n_shared, config.concepts)):
        domain_concepts[names[offset % config.domains]].append(concept)
    shifts = {}
    for d in names:
        direction = rng.normal(0.0, 1.0, config.embedding_dim)
        shifts[d] = direction / np.linalg.norm(direction) * config.domain_shift

    items, item_concept = [], {}
    pools = {d: {} for d in names}
    for d in names:
        concepts = domain_concepts[d]
        for index in range(config.items_per_domain):
            concept = concepts[index % len(concepts)]
            item_id = f"{d}{index:05d}"
            vector = concept_vectors[concept] + shifts[d] + rng.normal(0.0, config.noise, config.embedding_dim)
            items.append(ItemRecord(item_id, d, np.asarray(_round(vector))))
            item_concept[item_id] = concept
            pools[d].setdefault(concept, []).append(item_id)
    weights = {
        d: {c: _zipf(len(ids), config.popularity_exponent) for c, ids in pools[d].items()}
        for d in names
    }

    global_next = rng.permutation(config.concepts)
    local_next = {d: rng.permutation(len(domain_concepts[d])) for d in names}

    def pick_item(domain, concept):
        ids = pools[domain][concept]
        return ids[int(rng.choice(len(ids), p=weights[domain][concept]))]

    def step(current, successor, allowed):
        if rng.random() < config.transition_strength:
            return successor(current)
        return allowed[int(rng.integers(len(allowed)))]

    events, user_types, home = [], {}, {}
    line = 0
    for u in range(config.users):
        user_id = f"u{u:05d}"
        length = int(rng.integers(config.min_len, config.max_len + 1))
        ts = int(rng.integers(1_600_000_000, 1_700_000_000))
        cross = rng.random() < config.cross_user_fraction
        user_types[user_id] = 'cross' if cross else 'specialist'
        home[user_id] = names[int(rng.integers(config.domains))]
        visits = []
        if cross:
            concept = int(rng.integers(config.concepts))
            for _ in range(length):
                holders = [d for d in names if concept in pools[d]]
                visits.append((holders[int(rng.integers(len(holders)))], concept))
                concept = int(step(concept, lambda c: global_next[c], list(range(config.concepts))))
        else:
            d = home[user_id]
            concepts = domain_concepts[d]
            position = int(rng.integers(len(concepts)))
            for _ in range(length):
                if config.domains > 1 and rng.random() < 0.2:
                    other = [x for x in names if x != d][int(rng.integers(config.domains - 1))]
                    visits.append((other, domain_concepts[other][int(rng.integers(len(domain_concepts[other])))]))
                    continue
                visits.append((d, concepts[position]))
                position = int(step(position, lambda p: local_next[d][p], list(range(len(concepts)))))
        for domain, concept in visits:
            ts += int(rng.integers(60, 86_400))
            line += 1
            events.append(InteractionEvent(user_id, ts, pick_item(domain, concept), domain, line))

    labels = {
        'item_concepts': item_concept,
        'shared_concepts': shared,
        'domain_concepts': domain_concepts,
        'user_types': user_types,
        'home_domains': home,
        'seed': config.seed,
    }
    if out_dir is not None:
        write_dataset(out_dir, items, events, labels)
    logger.info(
        f"Synthesized {len(items)} items over {config.domains} domains and {len(events)} interactions "
        f"from {config.users} users"
    )
    return items, events, labels


def write_dataset(out_dir, items, events, labels=None):
    """Write items.jsonl, interactions.jsonl and (optionally) labels.json."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, 'items.jsonl'), 'w', encoding='utf-8') as handle:
        for item in items:
            handle.write(json.dumps(
                {'item_id': item.item_id, 'domain': item.domain, 'embedding': _round(item.embedding)}
            ) + '\n')
    with open(os.path.join(out_dir, 'interactions.jsonl'), 'w', encoding='utf-8') as handle:
        for event in events:
            handle.write(json.dumps(
                {'user_id': event.user_id, 'item_id': event.item_id, 'domain': event.domain, 'ts': event.ts}
            ) + '\n')
    if labels is not None:
        with open(os.path.join(out_dir, 'labels.json'), 'w', encoding='utf-8') as handle:
            json.dump(labels, handle, sort_keys=True, indent=2)


def load_labels(path):
    if not os.path.exists(path):
        return None
    with open(path, 'r', encoding='utf-8') as handle:
        return json.load(handle)
