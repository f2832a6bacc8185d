"""
Plain record types passed between pipeline stages.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ItemRecord:
    """An item's identifier, domain label, and dense feature embedding."""

    item_id: str
    domain: str
    embedding: np.ndarray = field(repr=False)


@dataclass(frozen=True, order=True)
class SemanticID:
    """
    M codebook indices plus a dedup suffix.

    The suffix is 0 unless several catalog items quantize to the same codes,
    in which case they are numbered 0, 1, 2, ... in ascending item_id order.
    """

    codes: tuple
    dedup: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'codes', tuple(int(c) for c in self.codes))
        if self.dedup < 0:
            raise ValueError("dedup suffix must be non-negative")

    @property
    def levels(self):
        return len(self.codes)

    def as_path(self):
        """Codes followed by the dedup suffix."""
        return self.codes + (self.dedup,)

    def __str__(self):
        return ','.join(str(c) for c in self.codes) + f'|{self.dedup}'


@dataclass(frozen=True, order=True)
class InteractionEvent:
    """One (user, item, domain, timestamp) interaction."""

    user_id: str
    ts: int
    item_id: str
    domain: str
    line: int = 0
