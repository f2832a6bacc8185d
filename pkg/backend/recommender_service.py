"""
Recommender service module for next-semantic-ID generation.

This module provides:
- The token vocabulary that renders semantic IDs into sequences
- History encoding with oldest-first truncation and a target-domain cue
- A small causal transformer backbone whose linears carry LoRA adapters
- A gated mixture of universal experts and per-domain specific adapters
- Universal, specific and user-router training phases
- Probability-space fusion of universal and specific predictions
- Per-query scoring functions for the constrained decoder
"""

import logging
from dataclasses import dataclass, asdict, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import FUSION_ORDERS, GATE_MODES
from errors import AdapterLookupError, FusionWeightError, InputError, ItemLookupError, ShapeError
from nn_core import (
    DTYPE,
    AdamW,
    LoraLinear,
    RngSeed,
    TransformerBlock,
    active_adapters,
    adapter_names,
    adapter_parameters,
    attach_adapter,
    check_finite_loss,
    freeze_module,
    make_trainable,
)
from router import VibRouter, build_router, vib_kl

# Configure logging
logger = logging.getLogger(__name__)

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIALS = 4

# Read by the specific and user-router phases, after the universal checkpoint is written
PHASE_SETTINGS = (
    'specific_epochs', 'specific_rank', 'specific_alpha', 'router_hidden', 'router_latent_dim',
    'router_epochs', 'router_lr', 'router_batch', 'vib_weight', 'fusion_order',
)


@dataclass
class RecConfig:
    """Backbone, expert, adapter and user-router settings."""

    layers: int = 2
    d_model: int = 64
    heads: int = 4
    ff_dim: int = 256
    max_len: int = 256
    tag_items: bool = True
    lora_targets: str = 'all'
    experts: int = 4
    expert_rank: int = 64
    expert_alpha: float = 128
    expert_dropout: float = 0.05
    gate_mode: str = 'prefix_mean'
    universal_epochs: int = 10
    specific_epochs: int = 10
    specific_rank: int = 64
    specific_alpha: float = 128
    lr: float = 5e-5
    batch: int = 8
    weight_decay: float = 0.01
    router_hidden: int = 128
    router_latent_dim: int = 16
    router_epochs: int = 20
    router_lr: float = 1e-3
    router_batch: int = 64
    vib_weight: float = 1e-3
    fusion_order: str = 'mask_then_fuse'

    def __post_init__(self):
        if self.experts < 1:
            raise InputError("At least one universal expert is required")
        if self.gate_mode not in GATE_MODES:
            raise InputError(f"Unknown gate mode '{self.gate_mode}'")
        if self.fusion_order not in FUSION_ORDERS:
            raise InputError(f"Unknown fusion order '{self.fusion_order}'")


class SidVocabulary:
    """
    Token layout: PAD, BOS, EOS, SEP, one tag per domain (sorted), one block
    per code level, then the dedup block.
    """

    def __init__(self, domains, codebook_sizes, dedup_size, tag_items=True):
        self.domains = sorted(domains)
        self.codebook_sizes = [int(k) for k in codebook_sizes]
        self.dedup_size = int(dedup_size)
        self.tag_items = tag_items
        self.level_offsets = []
        offset = SPECIALS + len(self.domains)
        for size in self.codebook_sizes:
            self.level_offsets.append(offset)
            offset += size
        self.dedup_offset = offset
        self.size = offset + self.dedup_size

    @classmethod
    def from_sid_map(cls, sid_map, domains, codebook_sizes, tag_items=True):
        dedup_size = max((sid.dedup for sid in sid_map.values()), default=0) + 1
        return cls(domains, codebook_sizes, dedup_size, tag_items)

    @property
    def levels(self):
        return len(self.codebook_sizes)

    def tag(self, domain):
        if domain not in self.domains:
            raise InputError(f"Unknown domain '{domain}'")
        return SPECIALS + self.domains.index(domain)

    def sid_tokens(self, sid):
        """The M code tokens followed by the dedup token."""
        if sid.levels != self.levels:
            raise ShapeError(f"Semantic ID has {sid.levels} levels, vocabulary has {self.levels}")
        tokens = []
        for level, code in enumerate(sid.codes):
            if not 0 <= code < self.codebook_sizes[level]:
                raise InputError(f"Code {code} out of range at level {level}")
            tokens.append(self.level_offsets[level] + code)
        if sid.dedup >= self.dedup_size:
            raise InputError(f"Dedup suffix {sid.dedup} exceeds the vocabulary's dedup block")
        tokens.append(self.dedup_offset + sid.dedup)
        return tokens

    def item_tokens(self, sid, domain):
        prefix = [self.tag(domain)] if self.tag_items else []
        return prefix + self.sid_tokens(sid) + [SEP]

    def to_dict(self):
        return {
            'domains': self.domains,
            'codebook_sizes': self.codebook_sizes,
            'dedup_size': self.dedup_size,
            'tag_items': self.tag_items,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data['domains'], data['codebook_sizes'], data['dedup_size'], data['tag_items'])


def _render(events, sid_map, vocab):
    rendered = []
    for event in sorted(events, key=lambda e: e.ts):
        sid = sid_map.get(event.item_id)
        if sid is None:
            raise ItemLookupError(f"Item '{event.item_id}' has no semantic ID", item=event.item_id)
        rendered.append(vocab.item_tokens(sid, event.domain))
    return rendered


def _fit(rendered, budget):
    kept, used = [], 0
    for tokens in reversed(rendered):
        if used + len(tokens) > budget:
            break
        kept.append(tokens)
        used += len(tokens)
    return [token for tokens in reversed(kept) for token in tokens]


def encode_history(events, sid_map, vocab, target_domain, max_len):
    """
    Render a user's multi-domain history as a generation context.

    Events are interleaved in chronological order, the oldest are dropped
    first to fit max_len, BOS is prepended and the target domain's tag is
    appended as the generation cue.

    Raises:
        InputError: If max_len < M + 3
        ItemLookupError: If an event's item has no semantic ID
    """
    if max_len < vocab.levels + 3:
        raise InputError(f"max_len {max_len} is below the minimum {vocab.levels + 3}")
    body = _fit(_render(events, sid_map, vocab), max_len - 2)
    return [BOS] + body + [vocab.tag(target_domain)]


def encode_sequence(events, sid_map, vocab, max_len):
    """Training sequence: BOS, the most recent items that fit, EOS."""
    return [BOS] + _fit(_render(events, sid_map, vocab), max_len - 2) + [EOS]


class RecBackbone(nn.Module):
    """Token and position embeddings, causal blocks, final norm and a zero-initialized head."""

    def __init__(self, vocab_size, config, generator=None):
        super().__init__()
        self.max_len = config.max_len
        self.token_embedding = nn.Parameter(
            torch.randn(vocab_size, config.d_model, generator=generator, dtype=DTYPE) * 0.02
        )
        self.position_embedding = nn.Parameter(
            torch.randn(config.max_len, config.d_model, generator=generator, dtype=DTYPE) * 0.02
        )
        self.blocks = nn.ModuleList([
            TransformerBlock(config.d_model, config.heads, config.ff_dim, causal=True, generator=generator)
            for _ in range(config.layers)
        ])
        self.norm = nn.LayerNorm(config.d_model)
        self.head = LoraLinear(config.d_model, vocab_size, generator=generator, zero_init=True)

    def hidden(self, tokens):
        length = tokens.shape[1]
        if length == 0:
            raise ShapeError("Token sequence is empty")
        if length > self.max_len:
            raise ShapeError(f"Sequence length {length} exceeds max_len {self.max_len}")
        h = F.embedding(tokens, self.token_embedding) + self.position_embedding[:length]
        for block in self.blocks:
            h = block(h)
        return self.norm(h)

    def forward(self, tokens):
        h = self.hidden(tokens)
        return self.head(h), h


class UniversalExpertMix(nn.Module):
    """
    N universal LoRA experts on the backbone and the softmax gate over them.

    The gate reads the bare backbone's hidden states: their running mean up
    to each position ('prefix_mean'), each position on its own ('token'),
    or nothing at all ('average', fixed 1/N).
    """

    def __init__(self, backbone, config, generator=None):
        super().__init__()
        self.names = [f"uni_{i}" for i in range(config.experts)]
        self.gate_mode = config.gate_mode
        for name in self.names:
            attach_adapter(
                backbone, name, config.expert_rank, config.expert_alpha, config.expert_dropout,
                generator=generator, targets=config.lora_targets,
            )
        self.gate = LoraLinear(config.d_model, config.experts, generator=generator)

    def weights(self, h_bare):
        """Gate weights (B, T, N); rows sum to 1."""
        batch, length, _ = h_bare.shape
        n = len(self.names)
        if n == 1 or self.gate_mode == 'average':
            return torch.full((batch, length, n), 1.0 / n, dtype=DTYPE)
        if self.gate_mode == 'prefix_mean':
            counts = torch.arange(1, length + 1, dtype=DTYPE).reshape(1, length, 1)
            rep = h_bare.cumsum(dim=1) / counts
        else:
            rep = h_bare
        return torch.softmax(self.gate(rep), dim=-1)


def specific_name(domain):
    return f"spec:{domain}"


class GenerativeRecommender(nn.Module):
    """Backbone, universal experts, specific adapters and the user router, with phase provenance."""

    def __init__(self, vocab, config, seed):
        super().__init__()
        rng = RngSeed(seed, 'recommender/init')
        rng.seed_torch()
        generator = rng.generator()
        self.vocab = vocab
        self.config = config
        self.seed = seed
        self.backbone = RecBackbone(vocab.size, config, generator)
        self.mix = UniversalExpertMix(self.backbone, config, generator)
        self.user_router = None
        self.phases = []

    def spec(self):
        return {
            'vocab': self.vocab.to_dict(),
            'config': asdict(self.config),
            'seed': self.seed,
            'phases': list(self.phases),
            'user_router': self.user_router.spec() if self.user_router is not None else None,
        }

    @classmethod
    def from_spec(cls, spec):
        model = cls(SidVocabulary.from_dict(spec['vocab']), RecConfig(**spec['config']), spec['seed'])
        model.phases = list(spec['phases'])
        if spec.get('user_router'):
            model.user_router = VibRouter(**spec['user_router'])
        return model

    def apply_phase_settings(self, config):
        """
        Take the later-phase settings from a live RecConfig.

        A restored model carries the settings it was first built with; the
        specific and user-router phases must train under the current ones.
        """
        self.config = replace(self.config, **{name: getattr(config, name) for name in PHASE_SETTINGS})
        return self

    def specific_domains(self):
        return sorted(n.split(':', 1)[1] for n in adapter_names(self.backbone) if n.startswith('spec:'))

    @property
    def context_budget(self):
        """Longest context that still leaves room for M+1 generated tokens."""
        return self.config.max_len - (self.vocab.levels + 1)


def pad_batch(sequences):
    """Right-pad with PAD; returns (tokens (B, T), lengths (B,))."""
    if not sequences:
        raise ShapeError("Cannot pad an empty batch")
    lengths = torch.as_tensor([len(s) for s in sequences], dtype=torch.long)
    tokens = torch.full((len(sequences), int(lengths.max())), PAD, dtype=torch.long)
    for i, seq in enumerate(sequences):
        tokens[i, :len(seq)] = torch.as_tensor(seq, dtype=torch.long)
    return tokens, lengths


def _as_batch(tokens):
    if not torch.is_tensor(tokens):
        tokens = torch.as_tensor(tokens, dtype=torch.long)
    return tokens.unsqueeze(0) if tokens.dim() == 1 else tokens


def last_hidden(hidden, lengths=None):
    if lengths is None:
        return hidden[:, -1]
    return hidden[torch.arange(hidden.shape[0]), lengths - 1]


def _mixed_pass(backbone, mix, tokens, gates, extra=()):
    active = [(name, gates[..., i]) for i, name in enumerate(mix.names)] + list(extra)
    with active_adapters(backbone, active):
        return backbone(tokens)


def universal_forward(tokens, backbone, mix, extra=(), lengths=None):
    """
    Mixture-of-experts forward pass.

    Each LoRA-bearing linear computes W0 x + sum_i g_i * delta_i(x) with g
    from the gate over the bare backbone's hidden states.

    Args:
        tokens: (T,) or (B, T) token ids
        extra (list): Further (adapter-name, weight) pairs, e.g. a specific adapter

    Returns:
        tuple: (logits (B, T, V), hidden (B, T, d), h_t (B, d) at the last real position)
    """
    tokens = _as_batch(tokens)
    with active_adapters(backbone, []):
        h_bare = backbone.hidden(tokens)
    logits, hidden = _mixed_pass(backbone, mix, tokens, mix.weights(h_bare), extra)
    return logits, hidden, last_hidden(hidden, lengths)


def forward_pair(model, tokens, domain, lengths=None):
    """
    Universal and specific logits sharing one gate computation.

    Returns:
        tuple: (universal logits, specific logits, h_t of the universal pass)
    """
    name = specific_name(domain)
    if name not in adapter_names(model.backbone):
        raise AdapterLookupError(f"No specific adapter for domain '{domain}'", adapter=name)
    tokens = _as_batch(tokens)
    with active_adapters(model.backbone, []):
        h_bare = model.backbone.hidden(tokens)
    gates = model.mix.weights(h_bare)
    uni_logits, hidden = _mixed_pass(model.backbone, model.mix, tokens, gates)
    spec_logits, _ = _mixed_pass(model.backbone, model.mix, tokens, gates, [(name, 1.0)])
    return uni_logits, spec_logits, last_hidden(hidden, lengths)


def next_token_loss(logits, tokens, reduction='mean'):
    """Cross-entropy of every next token; PAD targets are ignored."""
    vocab_size = logits.shape[-1]
    return F.cross_entropy(
        logits[:, :-1].reshape(-1, vocab_size), tokens[:, 1:].reshape(-1),
        ignore_index=PAD, reduction=reduction,
    )


def sequence_loss(model, sequences, extra=(), batch=32):
    """Token-weighted mean next-token loss over sequences, no gradient."""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(sequences), batch):
            tokens, _ = pad_batch(sequences[start:start + batch])
            logits, _, _ = universal_forward(tokens, model.backbone, model.mix, extra)
            total += float(next_token_loss(logits, tokens, reduction='sum'))
            count += int((tokens[:, 1:] != PAD).sum())
    model.train(was_training)
    return total / max(count, 1)


def _train_phase(model, sequences, params, epochs, seed, label, extra=(), select_fn=None):
    config = model.config
    optimizer = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = RngSeed(seed, label)
    shuffle = rng.child('shuffle').generator()
    rng.child('dropout').seed_torch()
    n = len(sequences)
    history = [{'epoch': 0, 'loss': sequence_loss(model, sequences, extra)}]
    logger.info(f"{label}: {n} sequences, initial loss {history[0]['loss']:.6f}")
    best = None

    for epoch in range(1, epochs + 1):
        model.train()
        order = torch.randperm(n, generator=shuffle).tolist()
        for start in range(0, n, config.batch):
            tokens, _ = pad_batch([sequences[i] for i in order[start:start + config.batch]])
            logits, _, _ = universal_forward(tokens, model.backbone, model.mix, extra)
            loss = next_token_loss(logits, tokens)
            check_finite_loss(loss, label, epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        model.eval()
        record = {'epoch': epoch, 'loss': check_finite_loss(sequence_loss(model, sequences, extra), label, epoch)}
        if select_fn is not None:
            record['val_recall'] = select_fn(epoch)
            if best is None or record['val_recall'] > best[0]:
                best = (record['val_recall'], epoch, {k: p.detach().clone() for k, p in params.items()})
        history.append(record)
        logger.info(f"{label} epoch {epoch}/{epochs}: " + ' '.join(
            f"{k}={v:.6f}" for k, v in record.items() if k != 'epoch'))

    if best is not None:
        with torch.no_grad():
            for name, value in best[2].items():
                params[name].copy_(value)
        logger.info(f"{label}: kept epoch {best[1]} (validation recall {best[0]:.4f})")
    return history


def universal_parameters(model):
    """Backbone weights, universal experts and the gate; specific adapters excluded."""
    params = {f"backbone.{k}": p for k, p in model.backbone.named_parameters() if '.adapters.spec:' not in k}
    params.update({f"mix.{k}": p for k, p in model.mix.named_parameters()})
    return params


def train_universal(sequences, model, seed, select_fn=None):
    """
    Next-token training over all users' cross-domain sequences.

    The backbone trains together with the experts and the gate; all of them
    are frozen afterwards.

    Args:
        sequences (list): Token lists from encode_sequence
        model (GenerativeRecommender): Fresh model
        seed (int): Seed for shuffling and dropout
        select_fn (callable, optional): epoch -> validation score; the best
            epoch's weights are kept

    Returns:
        list: Per-epoch history
    """
    if not sequences:
        raise InputError("Universal training needs at least one sequence")
    if 'universal' in model.phases:
        raise InputError("The universal phase has already been trained")
    params = make_trainable(universal_parameters(model))
    history = _train_phase(
        model, sequences, params, model.config.universal_epochs, seed, 'rec-universal', select_fn=select_fn
    )
    freeze_module(model.backbone)
    freeze_module(model.mix)
    model.phases.append('universal')
    return history


def train_specific(domain, sequences, model, seed, select_fn=None):
    """
    Train one domain's specific adapter on top of the frozen universal model.

    Raises:
        InputError: If the universal phase is incomplete or sequences are empty
    """
    if 'universal' not in model.phases:
        raise InputError("Specific training requires a completed universal phase")
    if not sequences:
        raise InputError(f"Domain '{domain}' has no sequences for specific training")
    config = model.config
    name = specific_name(domain)
    if name not in adapter_names(model.backbone):
        attach_adapter(
            model.backbone, name, config.specific_rank, config.specific_alpha, config.expert_dropout,
            generator=RngSeed(seed, f"rec-specific/{domain}/init").generator(), targets=config.lora_targets,
        )
    params = make_trainable(adapter_parameters(model.backbone, name))
    history = _train_phase(
        model, sequences, params, config.specific_epochs, seed, f"rec-specific/{domain}",
        extra=[(name, 1.0)], select_fn=select_fn,
    )
    for p in params.values():
        p.requires_grad_(False)
    model.phases.append(f"specific:{domain}")
    return history


def fuse_predictions(p_uni, p_spec, gamma):
    """
    (1 - gamma) * P_uni + gamma * P_spec.

    Raises:
        FusionWeightError: If gamma lies outside [0, 1]
        ShapeError: If the distributions have different shapes
    """
    g = torch.as_tensor(gamma, dtype=DTYPE)
    if not torch.isfinite(g).all() or (g < 0).any() or (g > 1).any():
        raise FusionWeightError(f"Fusion weight must lie in [0, 1], got {gamma}")
    p_uni = torch.as_tensor(p_uni, dtype=DTYPE)
    p_spec = torch.as_tensor(p_spec, dtype=DTYPE)
    if p_uni.shape != p_spec.shape:
        raise ShapeError(f"Cannot fuse distributions of shapes {tuple(p_uni.shape)} and {tuple(p_spec.shape)}")
    if g.dim():
        g = g.unsqueeze(-1)
    return (1.0 - g) * p_uni + g * p_spec


def user_route(h_t, router, mode='eval', noise=None, generator=None):
    """gamma = sigmoid(gate(z_r)); sampled z_r in train mode, posterior mean in eval."""
    was_training = router.training
    router.train(mode == 'train')
    try:
        gamma, _, _ = router(h_t, noise=noise, generator=generator)
    finally:
        router.train(was_training)
    return gamma


@dataclass
class RouterSample:
    """A held-out target: its context tokens and the target's M+1 token path."""

    user_id: str
    domain: str
    context: list
    target: tuple


def router_targets(model, samples, trees, batch=32):
    """
    Per-step probabilities of each sample's true next token.

    Returns:
        dict: h (n, d) context states; u, s (n, M+1) universal/specific
        probabilities of the target token; mass_u, mass_s (n, M+1) the
        probability mass each model puts on the valid set. Under
        mask_then_fuse, u and s are already normalized over the valid set
        and the masses are 1.
    """
    steps = model.vocab.levels + 1
    n = len(samples)
    out = {key: torch.ones(n, steps, dtype=DTYPE) for key in ('u', 's', 'mass_u', 'mass_s')}
    out['h'] = torch.zeros(n, model.config.d_model, dtype=DTYPE)
    masked = model.config.fusion_order == 'mask_then_fuse'
    model.eval()
    by_domain = {}
    for index, sample in enumerate(samples):
        by_domain.setdefault(sample.domain, []).append(index)
    with torch.no_grad():
        for domain in sorted(by_domain):
            indices = by_domain[domain]
            tree = trees[domain]
            for start in range(0, len(indices), batch):
                chunk = indices[start:start + batch]
                seqs = [samples[i].context + list(samples[i].target[:-1]) for i in chunk]
                tokens, _ = pad_batch(seqs)
                context_lengths = torch.as_tensor([len(samples[i].context) for i in chunk])
                uni, spec, h_t = forward_pair(model, tokens, domain, context_lengths)
                out['h'][chunk] = h_t
                for row, i in enumerate(chunk):
                    sample = samples[i]
                    for t in range(steps):
                        position = len(sample.context) - 1 + t
                        valid = torch.as_tensor(tree.valid_next(sample.target[:t]), dtype=torch.long)
                        token = sample.target[t]
                        for logits, prob_key, mass_key in ((uni, 'u', 'mass_u'), (spec, 's', 'mass_s')):
                            log_probs = torch.log_softmax(logits[row, position], dim=-1)
                            log_mass = torch.logsumexp(log_probs[valid], dim=0)
                            if masked:
                                out[prob_key][i, t] = torch.exp(log_probs[token] - log_mass)
                            else:
                                out[prob_key][i, t] = torch.exp(log_probs[token])
                                out[mass_key][i, t] = torch.exp(log_mass)
    return out


def user_router_losses(router, targets, vib_weight, fusion_order, rows=None, noise=None, generator=None):
    """
    Negative log-likelihood of the fused target path plus the VIB penalty.

    Returns:
        dict: l_ce, l_vib, total, gamma
    """
    pick = (lambda t: t) if rows is None else (lambda t: t[rows])
    gamma, m, s = router(pick(targets['h']), noise=noise, generator=generator)
    g = gamma.unsqueeze(-1)
    fused = (1.0 - g) * pick(targets['u']) + g * pick(targets['s'])
    if fusion_order == 'fuse_then_mask':
        fused = fused / ((1.0 - g) * pick(targets['mass_u']) + g * pick(targets['mass_s']))
    l_ce = -torch.log(fused.clamp_min(1e-300)).sum(-1).mean()
    l_vib = vib_kl(m, s).mean()
    return {'l_ce': l_ce, 'l_vib': l_vib, 'total': l_ce + vib_weight * l_vib, 'gamma': gamma}


def train_user_router(samples, model, trees, seed):
    """
    Fit the user router on validation targets with every other part frozen.

    Args:
        samples (list): RouterSample validation targets
        model (GenerativeRecommender): Model with universal and specific phases done
        trees (dict): domain -> PrefixTree over vocabulary tokens
        seed (int): Seed for init, shuffling and reparameterization noise

    Returns:
        tuple: (router, history); the router is frozen and attached to the model
    """
    if not samples:
        raise InputError("User-router training needs at least one validation target")
    config = model.config
    targets = router_targets(model, samples, trees)
    router = build_router(config.d_model, config.router_hidden, config.router_latent_dim, seed, 'user-router')
    optimizer = AdamW(dict(router.named_parameters()), lr=config.router_lr, weight_decay=0.0)
    rng = RngSeed(seed, 'user-router')
    shuffle = rng.child('shuffle').generator()
    noise = rng.child('noise').generator()
    n = len(samples)

    def evaluate(epoch):
        router.eval()
        with torch.no_grad():
            losses = user_router_losses(router, targets, config.vib_weight, config.fusion_order)
        return {'epoch': epoch, 'l_ce': float(losses['l_ce']), 'l_vib': float(losses['l_vib']),
                'median_gamma': float(losses['gamma'].median())}

    history = [evaluate(0)]
    for epoch in range(1, config.router_epochs + 1):
        router.train()
        order = torch.randperm(n, generator=shuffle)
        for start in range(0, n, config.router_batch):
            losses = user_router_losses(
                router, targets, config.vib_weight, config.fusion_order,
                rows=order[start:start + config.router_batch], generator=noise,
            )
            check_finite_loss(losses['total'], 'user-router', epoch)
            optimizer.zero_grad()
            losses['total'].backward()
            optimizer.step()
        history.append(evaluate(epoch))
        record = history[-1]
        logger.info(
            f"User router epoch {epoch}/{config.router_epochs}: ce={record['l_ce']:.6f} "
            f"vib={record['l_vib']:.6f} median gamma={record['median_gamma']:.4f}"
        )

    router.eval()
    freeze_module(router)
    model.user_router = router
    model.phases.append('user-router')
    return router, history


def query_gamma(model, context):
    """The user router's gamma for one context, computed once per query."""
    if model.user_router is None:
        raise InputError("The model has no trained user router")
    with torch.no_grad():
        _, _, h_t = universal_forward(context, model.backbone, model.mix)
        return float(user_route(h_t, model.user_router)[0])


def make_logits_fn(model, context, domain, variant='fused'):
    """
    Build the decoder's scoring callback for one query.

    Args:
        variant (str): 'fused' returns (universal, specific) logit pairs;
            'universal' or 'specific' return one model's logits

    Returns:
        callable: list of prefixes -> next-token logits at the last position
    """
    if variant not in ('fused', 'universal', 'specific'):
        raise InputError(f"Unknown scoring variant '{variant}'")
    if variant != 'universal' and specific_name(domain) not in adapter_names(model.backbone):
        raise AdapterLookupError(f"No specific adapter for domain '{domain}'", adapter=specific_name(domain))
    model.eval()
    context = list(context)

    def logits_fn(prefixes):
        tokens = torch.as_tensor([context + list(p) for p in prefixes], dtype=torch.long)
        with torch.no_grad():
            if variant == 'fused':
                uni, spec, _ = forward_pair(model, tokens, domain)
                return uni[:, -1], spec[:, -1]
            extra = [(specific_name(domain), 1.0)] if variant == 'specific' else []
            logits, _, _ = universal_forward(tokens, model.backbone, model.mix, extra)
            return logits[:, -1]
    return logits_fn
