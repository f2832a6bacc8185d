"""
Tokenizer service module for the xdrec pipeline.

This module provides the universal discrete semantic encoder:
- RQ-VAE encoder/decoder built from LoRA-capable linear stacks
- Greedy residual quantization against M codebooks
- Reconstruction, quantization (stop-gradient) and masked-code losses
- Joint pretraining over the whole multi-domain catalog
- Collision-free semantic ID assignment and the sids.tsv format
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import DegenerateContextError, InputError, ShapeError
from nn_core import (
    DTYPE,
    AdamW,
    LoraLinear,
    RngSeed,
    TransformerBlock,
    active_adapters,
    check_finite_loss,
    freeze_module,
)
from records import SemanticID

# Configure logging
logger = logging.getLogger(__name__)

QUANTIZE_CHUNK = 256


@dataclass
class PretrainConfig:
    """Architecture and optimization settings for tokenizer pretraining."""

    levels: int = 3
    codebook_size: int = 256
    latent_dim: int = 32
    hidden_dim: int = 128
    hidden_layers: int = 2
    mu: float = 1.0
    lam: float = 0.1
    beta: float = 0.25
    mask_rate: float = None
    epochs: int = 100
    lr: float = 1e-4
    batch: int = 512
    weight_decay: float = 0.0
    ctx_dim: int = 32
    ctx_layers: int = 2
    ctx_heads: int = 4

    def __post_init__(self):
        if self.mask_rate is None:
            self.mask_rate = 1.0 / self.levels if self.levels > 1 else 0.5
        if min(self.mu, self.lam, self.beta) < 0:
            raise InputError("Loss weights mu, lam and beta must be non-negative")
        if not (0.0 < self.mask_rate < 1.0):
            raise InputError("mask_rate must be in (0, 1)")
        if self.codebook_size < 2:
            raise InputError("codebook_size must be at least 2")


class Codebook(nn.Module):
    """K entries of dimension d_z for one quantization level."""

    def __init__(self, level, size, dim, generator=None):
        super().__init__()
        if size < 2:
            raise ShapeError("A codebook needs at least 2 entries")
        self.level = level
        self.entries = nn.Parameter(torch.randn(size, dim, generator=generator, dtype=DTYPE) * 0.1)

    @property
    def size(self):
        return self.entries.shape[0]


class MlpStack(nn.Module):
    """Linear layers with GELU between them (none after the last)."""

    def __init__(self, dims, generator=None):
        super().__init__()
        self.layers = nn.ModuleList(
            [LoraLinear(a, b, generator=generator) for a, b in zip(dims[:-1], dims[1:])]
        )

    def forward(self, x):
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last:
                x = F.gelu(x)
        return x


class CodeContextModel(nn.Module):
    """
    Bidirectional predictor of masked codes from the remaining ones.

    Unmasked positions are fed the chosen codebook vectors, masked positions
    a learned per-level MASK vector. Each level has its own output head that
    scores hidden states against that level's codebook entries, so the
    masked-code loss also shapes the codebooks.
    """

    def __init__(self, levels, latent_dim, dim, layers, heads, generator=None):
        super().__init__()
        self.levels = levels
        self.mask_vectors = nn.Parameter(torch.randn(levels, latent_dim, generator=generator, dtype=DTYPE) * 0.1)
        self.level_embedding = nn.Parameter(torch.randn(levels, dim, generator=generator, dtype=DTYPE) * 0.02)
        self.in_proj = LoraLinear(latent_dim, dim, generator=generator)
        self.blocks = nn.ModuleList(
            [TransformerBlock(dim, heads, 4 * dim, causal=False, generator=generator) for _ in range(layers)]
        )
        self.norm = nn.LayerNorm(dim)
        self.heads = nn.ModuleList([LoraLinear(dim, latent_dim, generator=generator) for _ in range(levels)])

    def forward(self, codes, mask, codebooks):
        """
        Args:
            codes (LongTensor): (B, M) true codes
            mask (BoolTensor): (B, M) positions hidden from the model
            codebooks (list): M entry tensors of shape (K_d, d_z)

        Returns:
            list: M logit tensors of shape (B, K_d)
        """
        chosen = torch.stack(
            [entries.index_select(0, codes[:, d]) for d, entries in enumerate(codebooks)], dim=1
        )
        inputs = torch.where(mask.unsqueeze(-1), self.mask_vectors.unsqueeze(0).expand_as(chosen), chosen)
        h = self.in_proj(inputs) + self.level_embedding
        for block in self.blocks:
            h = block(h)
        h = self.norm(h)
        return [self.heads[d](h[:, d]) @ entries.t() for d, entries in enumerate(codebooks)]


class RqVae(nn.Module):
    """Encoder, decoder, M residual codebooks and the masked-code context model."""

    def __init__(self, input_dim, config, generator=None):
        super().__init__()
        self.input_dim = input_dim
        self.config = config
        hidden = [config.hidden_dim] * config.hidden_layers
        self.encoder = MlpStack([input_dim] + hidden + [config.latent_dim], generator)
        self.decoder = MlpStack([config.latent_dim] + hidden + [input_dim], generator)
        self.codebooks = nn.ModuleList(
            [Codebook(d, config.codebook_size, config.latent_dim, generator) for d in range(config.levels)]
        )
        self.ctx_model = CodeContextModel(
            config.levels, config.latent_dim, config.ctx_dim, config.ctx_layers, config.ctx_heads, generator
        )
        self.frozen = False

    def spec(self):
        """Constructor arguments needed to rebuild this model."""
        return {'input_dim': self.input_dim, 'config': asdict(self.config)}

    def codebook_entries(self):
        return [cb.entries for cb in self.codebooks]

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def quantize(self, z):
        return residual_quantize(z, self.codebook_entries())

    def freeze(self):
        freeze_module(self)
        self.frozen = True
        self.eval()

    def universal_latents(self, x):
        """Encoder output with every adapter switched off."""
        with torch.no_grad(), active_adapters(self.encoder, []):
            return self.encode(x)


def build_rqvae(input_dim, config, seed):
    rng = RngSeed(seed, 'tokenizer/init')
    rng.seed_torch()
    return RqVae(input_dim, config, generator=rng.generator())


def _entries(codebooks):
    return [cb.entries if isinstance(cb, Codebook) else cb for cb in codebooks]


def _nearest(residual, entries):
    indices = []
    for start in range(0, residual.shape[0], QUANTIZE_CHUNK):
        chunk = residual[start:start + QUANTIZE_CHUNK]
        distances = (chunk.unsqueeze(1) - entries.unsqueeze(0)).pow(2).sum(-1)
        # argmin returns the first minimum, i.e. ties go to the lowest index
        indices.append(torch.argmin(distances, dim=1))
    return torch.cat(indices)


def residual_quantize(z, codebooks):
    """
    Greedy residual quantization.

    The residual chain subtracts stop-gradient entries, so residuals depend
    on the encoder only; z_hat keeps its path to the codebooks.

    Args:
        z (Tensor): Latent (d_z,) or batch (B, d_z)
        codebooks (list): Codebook modules or (K, d_z) entry tensors

    Returns:
        tuple: (codes (B, M) long, z_hat (B, d_z), residuals list of M (B, d_z))

    Raises:
        ShapeError: If codebooks are empty or dimensions disagree
    """
    entries = _entries(codebooks)
    if not entries:
        raise ShapeError("residual_quantize needs at least one codebook")
    single = z.dim() == 1
    if single:
        z = z.unsqueeze(0)
    for level, e in enumerate(entries):
        if e.shape[1] != z.shape[1]:
            raise ShapeError(f"Codebook level {level} has dimension {e.shape[1]}, latent has {z.shape[1]}")
    residual = z
    z_hat = torch.zeros_like(z)
    codes, residuals = [], []
    for e in entries:
        residuals.append(residual)
        index = _nearest(residual.detach(), e.detach())
        chosen = e.index_select(0, index)
        codes.append(index)
        z_hat = z_hat + chosen
        residual = residual - chosen.detach()
    codes = torch.stack(codes, dim=1)
    if single:
        return codes[0], z_hat[0], [r[0] for r in residuals]
    return codes, z_hat, residuals


def straight_through(z, z_hat):
    """Forward value z_hat, gradient of the identity onto z."""
    return z + (z_hat - z).detach()


def _batched(*tensors):
    return [t.unsqueeze(0) if t.dim() == 1 else t for t in tensors]


def quantization_terms(residuals, codes, codebooks):
    """
    The two halves of the quantization loss, each averaged over the batch.

    Returns:
        tuple: (codebook term sum_d ||sg(r_d) - e||^2, commitment term sum_d ||r_d - sg(e)||^2)
    """
    entries = _entries(codebooks)
    if codes.dim() == 1:
        codes = codes.unsqueeze(0)
    codebook_term = torch.zeros((), dtype=DTYPE)
    commitment_term = torch.zeros((), dtype=DTYPE)
    for level, (residual, e) in enumerate(zip(residuals, entries)):
        (residual,) = _batched(residual)
        chosen = e.index_select(0, codes[:, level])
        codebook_term = codebook_term + (residual.detach() - chosen).pow(2).sum(-1).mean()
        commitment_term = commitment_term + (residual - chosen.detach()).pow(2).sum(-1).mean()
    return codebook_term, commitment_term


def rq_losses(x, x_hat, residuals, codes, codebooks, beta):
    """
    Reconstruction and quantization losses.

    Returns:
        tuple: (L_REC, L_Q) with L_REC = ||x - x_hat||^2 and
        L_Q = sum_d ||sg(r_d) - e_{c_d}||^2 + beta ||r_d - sg(e_{c_d})||^2
    """
    x, x_hat = _batched(x, x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"Reconstruction shape {tuple(x_hat.shape)} does not match input {tuple(x.shape)}")
    if len(residuals) != len(_entries(codebooks)):
        raise ShapeError("One residual per codebook level is required")
    l_rec = (x - x_hat).pow(2).sum(-1).mean()
    codebook_term, commitment_term = quantization_terms(residuals, codes, codebooks)
    return l_rec, codebook_term + beta * commitment_term


def sample_mask(batch, levels, rate, generator=None):
    """
    Bernoulli mask with at least one masked and (for M > 1) one visible code per row.
    """
    mask = torch.rand((batch, levels), generator=generator) < rate
    forced = torch.randint(0, levels, (batch,), generator=generator)
    rows = torch.arange(batch)
    empty = ~mask.any(dim=1)
    mask[rows[empty], forced[empty]] = True
    if levels > 1:
        full = mask.all(dim=1)
        mask[rows[full], forced[full]] = False
    return mask


def mtm_loss(codes, mask_positions, ctx_model, codebooks=None):
    """
    Mean negative log-likelihood of the true codes at masked positions.

    Args:
        codes (LongTensor): (M,) or (B, M)
        mask_positions: (B, M) bool mask, or an iterable of level indices
            masked in every row
        ctx_model (callable): ctx_model(codes, mask, codebooks) -> list of M logit tensors
        codebooks (list, optional): Entry tensors handed to ctx_model

    Raises:
        DegenerateContextError: If M == 1 (masking leaves no context)
        InputError: If nothing is masked or a position is out of range
    """
    if codes.dim() == 1:
        codes = codes.unsqueeze(0)
    batch, levels = codes.shape
    if torch.is_tensor(mask_positions) and mask_positions.dtype == torch.bool:
        mask = mask_positions.reshape(batch, levels) if mask_positions.dim() == 1 else mask_positions
    else:
        positions = sorted(set(int(p) for p in mask_positions))
        if any(p < 0 or p >= levels for p in positions):
            raise InputError(f"Mask positions must lie in [0, {levels})")
        mask = torch.zeros(batch, levels, dtype=torch.bool)
        mask[:, positions] = True
    if not mask.any():
        raise InputError("mtm_loss needs at least one masked position")
    if levels == 1:
        raise DegenerateContextError("Masking the only code level leaves no context to predict from")
    logits = ctx_model(codes, mask, codebooks)
    total = torch.zeros((), dtype=DTYPE)
    for level in range(levels):
        selected = mask[:, level]
        if selected.any():
            total = total + F.cross_entropy(logits[level][selected], codes[selected, level], reduction='sum')
    return total / mask.sum()


def kmeans(data, k, generator=None, iterations=10):
    """Lloyd's k-means; rows are sampled with replacement when there are fewer than k."""
    n = data.shape[0]
    if n >= k:
        start = torch.randperm(n, generator=generator)[:k]
    else:
        start = torch.randint(0, n, (k,), generator=generator)
    centers = data[start].clone()
    if n < k:
        centers = centers + torch.randn(centers.shape, generator=generator) * 1e-3
    for _ in range(iterations):
        assign = _nearest(data, centers)
        for j in range(k):
            members = data[assign == j]
            if members.shape[0]:
                centers[j] = members.mean(dim=0)
    return centers


def initialize_codebooks(model, x_batch, generator=None):
    """k-means for level 0 on the first batch; perturbed residual rows for deeper levels."""
    with torch.no_grad():
        residual = model.universal_latents(x_batch)
        for level, codebook in enumerate(model.codebooks):
            if level == 0:
                centers = kmeans(residual, codebook.size, generator)
            else:
                rows = torch.randint(0, residual.shape[0], (codebook.size,), generator=generator)
                spread = residual.std().clamp_min(1e-6)
                centers = residual[rows] + torch.randn(
                    (codebook.size, residual.shape[1]), generator=generator
                ) * 0.1 * spread
            codebook.entries.copy_(centers)
            residual = residual - centers[_nearest(residual, centers)]


def reseed_dead_entries(model, usage, residual_pool, generator=None):
    """Replace entries unused for a full epoch with perturbed residual rows."""
    reseeded = 0
    with torch.no_grad():
        for level, codebook in enumerate(model.codebooks):
            dead = (usage[level] == 0).nonzero().reshape(-1)
            if dead.numel() == 0:
                continue
            pool = residual_pool[level]
            rows = torch.randint(0, pool.shape[0], (dead.numel(),), generator=generator)
            noise = torch.randn((dead.numel(), pool.shape[1]), generator=generator) * 0.01
            codebook.entries[dead] = pool[rows] + noise
            reseeded += dead.numel()
    return reseeded


def pretrain_losses(model, x, config, mask_generator=None):
    """
    All three pretraining losses on one batch.

    Returns:
        dict: l_rec, l_q, l_mtm, total tensors plus codes and residuals
    """
    z = model.encode(x)
    entries = model.codebook_entries()
    codes, z_hat, residuals = residual_quantize(z, entries)
    x_hat = model.decode(straight_through(z, z_hat))
    l_rec, l_q = rq_losses(x, x_hat, residuals, codes, entries, config.beta)
    if config.levels > 1:
        mask = sample_mask(x.shape[0], config.levels, config.mask_rate, mask_generator)
        l_mtm = mtm_loss(codes, mask, model.ctx_model, entries)
    else:
        l_mtm = torch.zeros((), dtype=DTYPE)
    total = l_rec + config.mu * l_q + config.lam * l_mtm
    return {
        'l_rec': l_rec, 'l_q': l_q, 'l_mtm': l_mtm, 'total': total,
        'codes': codes, 'residuals': residuals,
    }


def evaluate_pretrain_loss(model, x, config, seed):
    """Full-catalog loss components in eval mode with a fixed mask draw."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        losses = pretrain_losses(model, x, config, RngSeed(seed, 'tokenizer/eval-mask').generator())
    model.train(was_training)
    return {key: float(losses[key]) for key in ('total', 'l_rec', 'l_q', 'l_mtm')}


def items_matrix(items):
    """
    Stack item embeddings into a (N, d) tensor.

    Raises:
        InputError: If the catalog is empty
        ShapeError: If embeddings differ in length
    """
    if not items:
        raise InputError("The item catalog is empty")
    dims = {len(item.embedding) for item in items}
    if len(dims) != 1:
        raise ShapeError(f"Item embeddings must share one dimension, found {sorted(dims)}")
    return torch.as_tensor(np.stack([np.asarray(item.embedding, dtype=np.float64) for item in items]), dtype=DTYPE)


def pretrain(items, config, seed):
    """
    Train encoder, decoder, codebooks and context model jointly on all items.

    Args:
        items (list): ItemRecord catalog over all domains
        config (PretrainConfig): Loss weights and optimization settings
        seed (int): Seed for initialization, shuffling and masking

    Returns:
        tuple: (frozen RqVae, history list of per-epoch loss dicts; epoch 0 is the initial state)

    Raises:
        TrainingDivergenceError: If the loss becomes NaN (carries the epoch)
    """
    x = items_matrix(items)
    n = x.shape[0]
    rng = RngSeed(seed, 'tokenizer')
    model = build_rqvae(x.shape[1], config, seed)
    shuffle = rng.child('shuffle').generator()
    masks = rng.child('mask').generator()
    reseed = rng.child('reseed').generator()
    rng.child('dropout').seed_torch()

    initialize_codebooks(model, x[torch.randperm(n, generator=shuffle)[:config.batch]], reseed)
    if config.levels == 1 and config.lam > 0:
        logger.warning("Masked-code loss is undefined for a single level; it is skipped")

    optimizer = AdamW(dict(model.named_parameters()), lr=config.lr, weight_decay=config.weight_decay)
    history = [dict(epoch=0, **evaluate_pretrain_loss(model, x, config, seed))]
    logger.info(f"Tokenizer pretraining on {n} items: initial loss {history[0]['total']:.6f}")

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=shuffle)
        usage = [torch.zeros(config.codebook_size, dtype=torch.long) for _ in range(config.levels)]
        residual_pool = None
        for start in range(0, n, config.batch):
            batch = x[order[start:start + config.batch]]
            losses = pretrain_losses(model, batch, config, masks)
            check_finite_loss(losses['total'], 'tokenizer-pretrain', epoch)
            optimizer.zero_grad()
            losses['total'].backward()
            optimizer.step()
            for level in range(config.levels):
                usage[level] += torch.bincount(losses['codes'][:, level], minlength=config.codebook_size)
            residual_pool = [r.detach() for r in losses['residuals']]

        dead = reseed_dead_entries(model, usage, residual_pool, reseed)
        record = dict(epoch=epoch, reseeded=dead, **evaluate_pretrain_loss(model, x, config, seed))
        check_finite_loss(record['total'], 'tokenizer-pretrain', epoch)
        history.append(record)
        logger.info(
            f"Tokenizer epoch {epoch}/{config.epochs}: total={record['total']:.6f} "
            f"rec={record['l_rec']:.6f} q={record['l_q']:.6f} mtm={record['l_mtm']:.6f} reseeded={dead}"
        )

    model.freeze()
    logger.info("✓ Tokenizer pretraining complete; model frozen")
    return model, history


def quantization_error(z, codebooks):
    """Mean squared distance between latents and their quantized reconstruction."""
    with torch.no_grad():
        _, z_hat, _ = residual_quantize(z, codebooks)
        return float((z - z_hat).pow(2).sum(-1).mean())


def dedup_codes(code_map):
    """
    Attach dedup suffixes: items sharing codes get 0, 1, 2, ... by ascending item_id.

    Args:
        code_map (dict): item_id -> tuple of codes

    Returns:
        dict: item_id -> SemanticID
    """
    groups = defaultdict(list)
    for item_id in sorted(code_map):
        groups[tuple(code_map[item_id])].append(item_id)
    sid_map = {}
    collisions = 0
    for codes, members in groups.items():
        collisions += len(members) - 1
        for dedup, item_id in enumerate(members):
            sid_map[item_id] = SemanticID(codes, dedup)
    if collisions:
        logger.info(f"Semantic ID collisions resolved with dedup suffixes: {collisions}")
    return sid_map


def assign_sids(items, tokenizer, latents=None):
    """
    Assign a unique semantic ID to every catalog item.

    Args:
        items (list): ItemRecord catalog
        tokenizer (RqVae): Frozen tokenizer
        latents (dict, optional): item_id -> latent to quantize instead of the
            universal encoder output (used for fused latents)

    Returns:
        dict: item_id -> SemanticID (total and injective)

    Raises:
        InputError: If the tokenizer is not frozen
    """
    if not tokenizer.frozen:
        raise InputError("assign_sids requires a frozen tokenizer")
    if latents is None:
        z = tokenizer.universal_latents(items_matrix(items))
    else:
        z = torch.stack([torch.as_tensor(latents[item.item_id], dtype=DTYPE) for item in items])
    with torch.no_grad():
        codes, _, _ = tokenizer.quantize(z)
    code_map = {item.item_id: tuple(codes[i].tolist()) for i, item in enumerate(items)}
    return dedup_codes(code_map)


def write_sids_tsv(path, sid_map):
    """Write item_id, M codes and the dedup suffix, tab-separated, sorted by item_id."""
    with open(path, 'w', encoding='utf-8') as handle:
        for item_id in sorted(sid_map):
            sid = sid_map[item_id]
            handle.write('\t'.join([item_id] + [str(c) for c in sid.codes] + [str(sid.dedup)]) + '\n')


def read_sids_tsv(path):
    sid_map = {}
    with open(path, 'r', encoding='utf-8') as handle:
        for line in handle:
            parts = line.rstrip('\n').split('\t')
            if len(parts) < 3:
                continue
            sid_map[parts[0]] = SemanticID(tuple(int(p) for p in parts[1:-1]), int(parts[-1]))
    return sid_map
