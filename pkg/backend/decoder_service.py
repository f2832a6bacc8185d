"""
Decoder service module for constrained generation.

This module provides:
- Per-domain prefix trees over semantic ID token paths (flat node table,
  sorted child lists, binary-search lookup)
- Versioned binary serialization of trees
- Masked-softmax steps and fused beam search restricted to the tree
- An exhaustive full-catalog scorer used to check the beam search
- Unconstrained generation with rejection of invalid sequences
"""

import logging
import struct
from bisect import bisect_left
from dataclasses import dataclass, field

import torch

from errors import (
    DecodeConfigError,
    InputError,
    IntegrityError,
    InvalidPrefixError,
    ParseError,
    ShapeError,
)
from nn_core import masked_softmax
from recommender_service import fuse_predictions

# Configure logging
logger = logging.getLogger(__name__)

TRIE_MAGIC = b'XDRCTRIE'
TRIE_VERSION = 1


class PrefixTree:
    """
    Immutable trie of one domain's semantic ID paths.

    Node 0 is the root. Each node keeps its child tokens sorted ascending
    with the matching child node indices; leaves are bound to item ids.
    """

    def __init__(self, domain, depth, child_tokens, child_nodes, leaf_items):
        self.domain = domain
        self.depth = depth
        self._child_tokens = [tuple(t) for t in child_tokens]
        self._child_nodes = [tuple(c) for c in child_nodes]
        self._leaf_items = dict(leaf_items)

    @property
    def node_count(self):
        return len(self._child_tokens)

    @property
    def item_count(self):
        return len(self._leaf_items)

    def _node(self, prefix):
        node = 0
        for token in prefix:
            tokens = self._child_tokens[node]
            i = bisect_left(tokens, token)
            if i == len(tokens) or tokens[i] != token:
                return None
            node = self._child_nodes[node][i]
        return node

    def valid_next(self, prefix):
        """
        Child tokens of the prefix node, ascending.

        Raises:
            InvalidPrefixError: If the prefix is not a path of the tree
        """
        prefix = tuple(prefix)
        node = self._node(prefix)
        if node is None:
            raise InvalidPrefixError(f"Prefix {prefix} is not in the {self.domain} tree", prefix=list(prefix))
        return self._child_tokens[node]

    def contains(self, prefix):
        return self._node(tuple(prefix)) is not None

    def item_at(self, path):
        """Item bound to a full path, or None if the path is not a leaf."""
        if len(path) != self.depth:
            return None
        node = self._node(tuple(path))
        return None if node is None else self._leaf_items.get(node)

    def paths(self):
        """Enumerate every root-to-leaf path: item_id -> token tuple."""
        found = {}
        stack = [(0, ())]
        while stack:
            node, prefix = stack.pop()
            if node in self._leaf_items:
                found[self._leaf_items[node]] = prefix
            for token, child in zip(self._child_tokens[node], self._child_nodes[node]):
                stack.append((child, prefix + (token,)))
        return found

    def prefixes(self, length):
        """Distinct valid prefixes of the given length, sorted."""
        return sorted({path[:length] for path in self.paths().values()})

    def to_bytes(self):
        """
        Serialize as: magic, version, domain, depth, node count, leaf count,
        then per node its (child token, child index) pairs, then the leaf table.
        """
        domain = self.domain.encode('utf-8')
        out = [TRIE_MAGIC, struct.pack('<H', TRIE_VERSION), struct.pack('<H', len(domain)), domain,
               struct.pack('<HII', self.depth, self.node_count, self.item_count)]
        for tokens, nodes in zip(self._child_tokens, self._child_nodes):
            out.append(struct.pack('<I', len(tokens)))
            for token, child in zip(tokens, nodes):
                out.append(struct.pack('<II', token, child))
        for node in sorted(self._leaf_items):
            item = self._leaf_items[node].encode('utf-8')
            out.append(struct.pack('<IH', node, len(item)))
            out.append(item)
        return b''.join(out)

    @classmethod
    def from_bytes(cls, data):
        """
        Raises:
            ParseError: If the header or tables are malformed
        """
        try:
            if data[:len(TRIE_MAGIC)] != TRIE_MAGIC:
                raise ParseError("Not a prefix tree file (bad magic)")
            offset = len(TRIE_MAGIC)
            (version,) = struct.unpack_from('<H', data, offset)
            if version != TRIE_VERSION:
                raise ParseError(f"Unsupported prefix tree version {version}")
            (length,) = struct.unpack_from('<H', data, offset + 2)
            offset += 4
            domain = data[offset:offset + length].decode('utf-8')
            offset += length
            depth, node_count, leaf_count = struct.unpack_from('<HII', data, offset)
            offset += struct.calcsize('<HII')
            child_tokens, child_nodes = [], []
            for _ in range(node_count):
                (count,) = struct.unpack_from('<I', data, offset)
                offset += 4
                pairs = [struct.unpack_from('<II', data, offset + 8 * i) for i in range(count)]
                offset += 8 * count
                child_tokens.append([p[0] for p in pairs])
                child_nodes.append([p[1] for p in pairs])
            leaves = {}
            for _ in range(leaf_count):
                node, length = struct.unpack_from('<IH', data, offset)
                offset += 6
                leaves[node] = data[offset:offset + length].decode('utf-8')
                offset += length
        except (struct.error, UnicodeDecodeError) as e:
            raise ParseError(f"Truncated or corrupt prefix tree: {e}")
        return cls(domain, depth, child_tokens, child_nodes, leaves)

    def save(self, path):
        with open(path, 'wb') as handle:
            handle.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, 'rb') as handle:
            return cls.from_bytes(handle.read())


def build_tree(domain, sid_map, encode=None):
    """
    Build the prefix tree of one domain.

    Args:
        domain (str): Domain label
        sid_map (dict): item_id -> SemanticID for the domain's items only
        encode (callable, optional): SemanticID -> token tuple; defaults to
            the raw codes followed by the dedup suffix

    Returns:
        PrefixTree

    Raises:
        InputError: If sid_map is empty
        ShapeError: If paths differ in length
        IntegrityError: If two items share a full path
    """
    if not sid_map:
        raise InputError(f"Domain '{domain}' has no items to build a prefix tree from")
    encode = encode or (lambda sid: sid.as_path())
    paths = sorted((tuple(encode(sid)), item_id) for item_id, sid in sid_map.items())
    depth = len(paths[0][0])
    child_tokens, child_nodes, leaves = [[]], [[]], {}
    previous = None
    for path, item_id in paths:
        if len(path) != depth:
            raise ShapeError(f"Semantic ID paths in '{domain}' differ in length")
        if path == previous:
            raise IntegrityError(f"Items share the semantic ID path {path} in domain '{domain}'", item=item_id)
        previous = path
        node = 0
        for token in path:
            # paths arrive sorted, so a new child always goes last
            if child_tokens[node] and child_tokens[node][-1] == token:
                node = child_nodes[node][-1]
                continue
            child_tokens.append([])
            child_nodes.append([])
            child_tokens[node].append(token)
            child_nodes[node].append(len(child_tokens) - 1)
            node = len(child_tokens) - 1
        leaves[node] = item_id
    tree = PrefixTree(domain, depth, child_tokens, child_nodes, leaves)
    logger.info(f"Built prefix tree for {domain}: {tree.item_count} items, {tree.node_count} nodes")
    return tree


def constrained_step(logits, tree, prefix):
    """Masked softmax of the logits over the prefix's valid next tokens."""
    return masked_softmax(logits, list(tree.valid_next(prefix)))


def step_log_probs(outputs, valid, gamma=None, fusion_order='mask_then_fuse'):
    """
    Log-probabilities of the next token for one prefix.

    Args:
        outputs: Logit vector, or a (universal, specific) pair of logit vectors
        valid (list): Allowed token ids
        gamma (float): Fusion weight, required for a pair
        fusion_order (str): 'mask_then_fuse' masks and normalizes each model
            before fusing; 'fuse_then_mask' fuses full softmaxes then masks
    """
    if not isinstance(outputs, tuple):
        return torch.log(masked_softmax(outputs, valid))
    uni, spec = outputs
    if fusion_order == 'mask_then_fuse':
        fused = fuse_predictions(masked_softmax(uni, valid), masked_softmax(spec, valid), gamma)
    elif fusion_order == 'fuse_then_mask':
        full = fuse_predictions(torch.softmax(uni, -1), torch.softmax(spec, -1), gamma)
        # Entries that underflow to 0 stay finite so the renormalization cannot produce NaN
        fused = masked_softmax(torch.log(torch.clamp_min(full, torch.finfo(full.dtype).tiny)), valid)
    else:
        raise DecodeConfigError(f"Unknown fusion order '{fusion_order}'")
    return torch.log(fused)


@dataclass
class Beam:
    """Beam entries (token prefix, cumulative log-probability), best first."""

    width: int = None
    entries: list = field(default_factory=lambda: [((), 0.0)])

    def prefixes(self):
        return sorted(prefix for prefix, _ in self.entries)

    def extend(self, candidates):
        candidates.sort(key=lambda c: (-c[1], c[0]))
        self.entries = candidates if self.width is None else candidates[:self.width]


def _row(outputs, i):
    if isinstance(outputs, tuple):
        return (outputs[0][i], outputs[1][i])
    return outputs[i]


def _search(logits_fn, tree, beam_width, k, gamma, fusion_order, vocab_size=None):
    if k < 1:
        raise DecodeConfigError("k must be at least 1")
    if beam_width is not None and beam_width < k:
        raise DecodeConfigError(f"Beam width {beam_width} is smaller than k={k}")
    beam = Beam(beam_width)
    for _ in range(tree.depth):
        prefixes = beam.prefixes()
        scores = dict(beam.entries)
        outputs = logits_fn(prefixes)
        candidates = []
        for i, prefix in enumerate(prefixes):
            if vocab_size is None:
                valid = list(tree.valid_next(prefix))
            else:
                valid = list(range(vocab_size))
            log_probs = step_log_probs(_row(outputs, i), valid, gamma, fusion_order)
            base = scores[prefix]
            for token, value in zip(valid, log_probs[valid].tolist()):
                candidates.append((prefix + (token,), base + value))
        beam.extend(candidates)

    ranked, invalid = [], 0
    for prefix, score in beam.entries:
        item_id = tree.item_at(prefix)
        if item_id is None:
            invalid += 1
            continue
        ranked.append((item_id, score))
    return ranked[:k], invalid


def beam_generate(logits_fn, tree, beam_width, k, gamma=None, fusion_order='mask_then_fuse'):
    """
    Deterministic beam search of depth M+1 restricted to the prefix tree.

    Args:
        logits_fn (callable): list of prefixes -> (P, V) logits, or a
            (universal, specific) pair of such tensors
        tree (PrefixTree): Target-domain tree
        beam_width (int): B >= k, or None for an exhaustive beam
        k (int): Number of items to return
        gamma (float, optional): Fusion weight when logits_fn returns a pair

    Returns:
        list: (item_id, log-probability) best first; ties by token order

    Raises:
        DecodeConfigError: If B < k
    """
    ranked, _ = _search(logits_fn, tree, beam_width, k, gamma, fusion_order)
    return ranked


def unconstrained_generate(logits_fn, tree, beam_width, k, vocab_size, gamma=None,
                           fusion_order='mask_then_fuse'):
    """
    Beam search over the full vocabulary; completed sequences that are not
    items of the target domain are dropped.

    Returns:
        tuple: (ranked list, number of rejected sequences)
    """
    return _search(logits_fn, tree, beam_width, k, gamma, fusion_order, vocab_size=vocab_size)


def exhaustive_rank(logits_fn, tree, gamma=None, fusion_order='mask_then_fuse'):
    """
    Score every catalog path of the tree and rank them.

    logits_fn is called once per depth with every valid prefix of that
    length, sorted, so its batches match an exhaustive beam's exactly.
    """
    paths = tree.paths()
    step_scores = {}
    for depth in range(tree.depth):
        prefixes = tree.prefixes(depth)
        outputs = logits_fn(prefixes)
        for i, prefix in enumerate(prefixes):
            valid = list(tree.valid_next(prefix))
            values = step_log_probs(_row(outputs, i), valid, gamma, fusion_order)[valid].tolist()
            step_scores[prefix] = dict(zip(valid, values))
    scored = []
    for item_id, path in paths.items():
        score = 0.0
        for depth in range(tree.depth):
            score = score + step_scores[path[:depth]][path[depth]]
        scored.append((-score, path, item_id))
    scored.sort()
    return [(item_id, -neg) for neg, _, item_id in scored]
