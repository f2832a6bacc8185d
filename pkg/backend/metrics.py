"""
Ranking metrics and the metrics report.
"""

import json
import logging
import math
from dataclasses import dataclass, field

# Configure logging
logger = logging.getLogger(__name__)


def _check_k(k):
    if k < 1:
        raise ValueError("K must be at least 1")


def target_rank(ranked, target):
    """1-based rank of the target in the ranked list, or None."""
    for rank, item in enumerate(ranked, start=1):
        if item == target:
            return rank
    return None


def recall_at_k(ranked, target, k):
    """1 if the target is in the top-K of the ranked item ids, else 0."""
    _check_k(k)
    rank = target_rank(ranked[:k], target)
    return 0 if rank is None else 1


def ndcg_at_k(ranked, target, k):
    """Single-target NDCG: 1 / log2(rank + 1) within the top-K, else 0."""
    _check_k(k)
    rank = target_rank(ranked[:k], target)
    return 0.0 if rank is None else 1.0 / math.log2(rank + 1)


def mean(values):
    values = list(values)
    return sum(values) / len(values) if values else 0.0


@dataclass
class MetricsReport:
    """
    Per-domain Recall@K and NDCG@K with user counts, excluded-sequence
    counts, the seed and the config hash.
    """

    seed: int
    config_hash: str
    ks: list = field(default_factory=lambda: [5, 10])
    domains: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def add_domain(self, domain, rankings, excluded=0):
        """
        Aggregate one domain.

        Args:
            rankings (list): (ranked item ids, target item id) per evaluated user
            excluded (int): User sequences too short to evaluate
        """
        row = {'users': len(rankings), 'excluded': excluded}
        for k in self.ks:
            row[f'recall@{k}'] = mean(recall_at_k(r, t, k) for r, t in rankings)
            row[f'ndcg@{k}'] = mean(ndcg_at_k(r, t, k) for r, t in rankings)
        self.domains[domain] = row
        return row

    def metric(self, domain, name):
        return self.domains[domain][name]

    def to_dict(self):
        return {
            'seed': self.seed,
            'config_hash': self.config_hash,
            'ks': list(self.ks),
            'domains': {d: {k: _rounded(v) for k, v in row.items()} for d, row in sorted(self.domains.items())},
            'extra': self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + '\n'

    def to_tsv(self):
        columns = ['users', 'excluded'] + [f'{m}@{k}' for m in ('recall', 'ndcg') for k in self.ks]
        lines = ['\t'.join(['domain'] + columns)]
        for domain, row in sorted(self.domains.items()):
            lines.append('\t'.join([domain] + [_format(row[c]) for c in columns]))
        return '\n'.join(lines) + '\n'

    def write(self, json_path, tsv_path=None):
        with open(json_path, 'w', encoding='utf-8') as handle:
            handle.write(self.to_json())
        if tsv_path:
            with open(tsv_path, 'w', encoding='utf-8') as handle:
                handle.write(self.to_tsv())
        logger.info(f"Wrote metrics for {len(self.domains)} domain(s) to {json_path}")

    @classmethod
    def from_dict(cls, data):
        return cls(data['seed'], data['config_hash'], list(data['ks']), dict(data['domains']), dict(data.get('extra', {})))

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as handle:
            return cls.from_dict(json.load(handle))


def _rounded(value):
    return round(value, 10) if isinstance(value, float) else value


def _format(value):
    return f"{value:.6f}" if isinstance(value, float) else str(value)
