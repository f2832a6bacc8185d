"""
Adapter service module for domain-specific semantic tokens.

This module provides:
- Per-domain LoRA adapters on the frozen tokenizer encoder
- Adapter training with a straight-through reconstruction loss
- Item routing between universal and domain-specific latents
- Router training with a variational bottleneck penalty
- Fused semantic ID assignment, routing reports and embedding dumps
"""

import json
import logging
from dataclasses import dataclass

import torch

from errors import AdapterLookupError, InputError
from nn_core import (
    DTYPE,
    AdamW,
    RngSeed,
    active_adapters,
    adapter_names,
    adapter_parameters,
    attach_adapter,
    check_finite_loss,
    freeze_module,
    make_trainable,
)
from router import build_router, vib_kl
from tokenizer_service import assign_sids, items_matrix, residual_quantize, straight_through

# Configure logging
logger = logging.getLogger(__name__)


def adapter_name(domain):
    """Name under which a domain's item adapter is attached to the encoder."""
    return f"item:{domain}"


@dataclass
class FusedLatent:
    """Universal and specific latents with the gate weight that mixes them."""

    z_uni: torch.Tensor
    z_spec: torch.Tensor
    alpha: torch.Tensor
    z_fused: torch.Tensor


def fuse_latents(z_uni, z_spec, alpha):
    """(1 - alpha) * z_uni + alpha * z_spec with alpha broadcast over the latent axis."""
    alpha = torch.as_tensor(alpha, dtype=DTYPE)
    weight = alpha.unsqueeze(-1) if alpha.dim() else alpha
    return FusedLatent(z_uni, z_spec, alpha, (1.0 - weight) * z_uni + weight * z_spec)


def _require_frozen(tokenizer):
    if not getattr(tokenizer, 'frozen', False):
        raise InputError("The tokenizer must be frozen before adapters are trained")


def _require_adapter(tokenizer, domain):
    name = adapter_name(domain)
    if name not in adapter_names(tokenizer.encoder):
        raise AdapterLookupError(f"No item adapter for domain '{domain}'", adapter=name)
    return name


def specific_latents(x, tokenizer, domain):
    """Encoder output with only the domain's adapter active (no gradient)."""
    name = _require_adapter(tokenizer, domain)
    with torch.no_grad(), active_adapters(tokenizer.encoder, [(name, 1.0)]):
        return tokenizer.encode(x)


def reconstruction_error(x, tokenizer, domain=None):
    """
    Mean ||x - D(Q(E(x)))||^2 with the universal encoder, or the domain's
    adapted encoder when a domain is given.
    """
    active = [] if domain is None else [(_require_adapter(tokenizer, domain), 1.0)]
    with torch.no_grad(), active_adapters(tokenizer.encoder, active):
        z = tokenizer.encode(x)
        _, z_hat, _ = residual_quantize(z, tokenizer.codebook_entries())
        return float((x - tokenizer.decode(z_hat)).pow(2).sum(-1).mean())


def adapter_loss(x, tokenizer, name):
    """Straight-through reconstruction loss through the adapted encoder."""
    with active_adapters(tokenizer.encoder, [(name, 1.0)]):
        z = tokenizer.encode(x)
    _, z_hat, _ = residual_quantize(z, tokenizer.codebook_entries())
    x_hat = tokenizer.decode(straight_through(z, z_hat))
    return (x - x_hat).pow(2).sum(-1).mean()


def train_adapter(domain, items, tokenizer, config, seed):
    """
    Train one domain's adapter on the frozen tokenizer.

    Args:
        domain (str): Domain label
        items (list): ItemRecords, all from the domain
        tokenizer (RqVae): Frozen tokenizer
        config (dict): rank, alpha, dropout, epochs, lr, batch
        seed (int): Seed for adapter init, shuffling and dropout

    Returns:
        tuple: (adapter parameter dict, history list)

    Raises:
        InputError: If items are empty, from another domain, or the tokenizer is not frozen
    """
    _require_frozen(tokenizer)
    if not items:
        raise InputError(f"Domain '{domain}' has no items to train an adapter on")
    strays = [item.item_id for item in items if item.domain != domain]
    if strays:
        raise InputError(f"Items {strays[:3]} are not in domain '{domain}'")

    rng = RngSeed(seed, f"adapter/{domain}")
    name = adapter_name(domain)
    if name not in adapter_names(tokenizer.encoder):
        attach_adapter(
            tokenizer.encoder, name, config['rank'], config['alpha'], config['dropout'],
            generator=rng.child('init').generator(),
        )
    params = make_trainable(adapter_parameters(tokenizer.encoder, name))
    optimizer = AdamW(params, lr=config['lr'], weight_decay=0.0)
    shuffle = rng.child('shuffle').generator()
    rng.child('dropout').seed_torch()

    x = items_matrix(items)
    n = x.shape[0]
    baseline = reconstruction_error(x, tokenizer)
    history = [{'epoch': 0, 'loss': reconstruction_error(x, tokenizer, domain), 'universal': baseline}]
    logger.info(f"Adapter {name}: {n} items, universal reconstruction error {baseline:.6f}")

    for epoch in range(1, config['epochs'] + 1):
        tokenizer.encoder.train()
        order = torch.randperm(n, generator=shuffle)
        for start in range(0, n, config['batch']):
            loss = adapter_loss(x[order[start:start + config['batch']]], tokenizer, name)
            check_finite_loss(loss, f"adapter {domain}", epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        tokenizer.encoder.eval()
        value = check_finite_loss(reconstruction_error(x, tokenizer, domain), f"adapter {domain}", epoch)
        history.append({'epoch': epoch, 'loss': value, 'universal': baseline})
        logger.info(f"Adapter {name} epoch {epoch}/{config['epochs']}: loss={value:.6f}")

    tokenizer.eval()
    for p in params.values():
        p.requires_grad_(False)
    return params, history


def train_adapters(items, tokenizer, config, seed):
    """Train one adapter per domain present in the catalog, in sorted domain order."""
    by_domain = {}
    for item in items:
        by_domain.setdefault(item.domain, []).append(item)
    histories = {}
    for domain in sorted(by_domain):
        _, histories[domain] = train_adapter(domain, by_domain[domain], tokenizer, config, seed)
    return histories


def _route(x, domains, tokenizer, router, noise=None, generator=None):
    """Batched routing; domains is a list aligned with the rows of x."""
    z_uni = tokenizer.universal_latents(x)
    z_spec = torch.empty_like(z_uni)
    for domain in sorted(set(domains)):
        rows = torch.as_tensor([i for i, d in enumerate(domains) if d == domain], dtype=torch.long)
        z_spec[rows] = specific_latents(x[rows], tokenizer, domain)
    alpha, m, s = router(x, noise=noise, generator=generator)
    return fuse_latents(z_uni, z_spec, alpha), m, s


def route_item(x, domain, tokenizer, router, mode='eval', noise=None, generator=None):
    """
    Route one item embedding (or a batch from one domain).

    Args:
        x (Tensor): (d,) or (B, d) item embeddings
        domain (str): Domain of the items
        tokenizer (RqVae): Frozen tokenizer with the domain's adapter
        router (VibRouter): Item router
        mode (str): 'train' samples z_r; 'eval' uses the posterior mean

    Returns:
        FusedLatent

    Raises:
        AdapterLookupError: If the domain has no adapter
    """
    _require_adapter(tokenizer, domain)
    if mode not in ('train', 'eval'):
        raise InputError(f"Unknown routing mode '{mode}'")
    single = x.dim() == 1
    batch = x.unsqueeze(0) if single else x
    was_training = router.training
    router.train(mode == 'train')
    try:
        with torch.no_grad():
            fused, _, _ = _route(batch, [domain] * batch.shape[0], tokenizer, router, noise, generator)
    finally:
        router.train(was_training)
    if single:
        return FusedLatent(fused.z_uni[0], fused.z_spec[0], fused.alpha[0], fused.z_fused[0])
    return fused


def router_losses(x, z_uni, z_spec, tokenizer, router, vib_weight, noise=None, generator=None):
    """
    Reconstruction of x from the quantized fused latent plus the VIB penalty.

    z_uni and z_spec are precomputed with the frozen encoder, so gradients
    reach the router only.
    """
    alpha, m, s = router(x, noise=noise, generator=generator)
    fused = fuse_latents(z_uni, z_spec, alpha)
    _, z_hat, _ = residual_quantize(fused.z_fused, tokenizer.codebook_entries())
    x_hat = tokenizer.decode(straight_through(fused.z_fused, z_hat))
    l_rec = (x - x_hat).pow(2).sum(-1).mean()
    l_vib = vib_kl(m, s).mean()
    return {'l_rec': l_rec, 'l_vib': l_vib, 'total': l_rec + vib_weight * l_vib, 'alpha': alpha}


def train_router(items, tokenizer, config, seed):
    """
    Train the item router after every domain adapter is trained and frozen.

    Args:
        items (list): ItemRecords over all domains
        tokenizer (RqVae): Frozen tokenizer carrying every domain's adapter
        config (dict): hidden, latent_dim, epochs, lr, batch, vib_weight
        seed (int): Seed for init, shuffling and reparameterization noise

    Returns:
        tuple: (router in eval mode with frozen parameters, history list)

    Raises:
        AdapterLookupError: If some domain has no adapter
        TrainingDivergenceError: If a loss becomes non-finite (carries the epoch)
    """
    _require_frozen(tokenizer)
    if not items:
        raise InputError("Router training needs a non-empty catalog")
    domains = [item.domain for item in items]
    for domain in sorted(set(domains)):
        _require_adapter(tokenizer, domain)

    x = items_matrix(items)
    z_uni = tokenizer.universal_latents(x)
    z_spec = torch.empty_like(z_uni)
    for domain in sorted(set(domains)):
        rows = torch.as_tensor([i for i, d in enumerate(domains) if d == domain], dtype=torch.long)
        z_spec[rows] = specific_latents(x[rows], tokenizer, domain)

    rng = RngSeed(seed, 'item-router')
    router = build_router(x.shape[1], config['hidden'], config['latent_dim'], seed, 'item-router')
    optimizer = AdamW(dict(router.named_parameters()), lr=config['lr'], weight_decay=0.0)
    shuffle = rng.child('shuffle').generator()
    noise = rng.child('noise').generator()
    n = x.shape[0]
    history = []

    for epoch in range(1, config['epochs'] + 1):
        router.train()
        order = torch.randperm(n, generator=shuffle)
        totals = {'l_rec': 0.0, 'l_vib': 0.0}
        for start in range(0, n, config['batch']):
            rows = order[start:start + config['batch']]
            losses = router_losses(
                x[rows], z_uni[rows], z_spec[rows], tokenizer, router, config['vib_weight'], generator=noise
            )
            check_finite_loss(losses['total'], 'item-router', epoch)
            optimizer.zero_grad()
            losses['total'].backward()
            optimizer.step()
            totals['l_rec'] += float(losses['l_rec']) * rows.numel()
            totals['l_vib'] += float(losses['l_vib']) * rows.numel()
        record = {'epoch': epoch, 'l_rec': totals['l_rec'] / n, 'l_vib': totals['l_vib'] / n}
        history.append(record)
        logger.info(
            f"Item router epoch {epoch}/{config['epochs']}: rec={record['l_rec']:.6f} vib={record['l_vib']:.6f}"
        )

    router.eval()
    freeze_module(router)
    return router, history


def route_catalog(items, tokenizer, router):
    """Eval-mode routing of the whole catalog, keyed by item_id."""
    x = items_matrix(items)
    was_training = router.training
    router.eval()
    try:
        with torch.no_grad():
            fused, _, _ = _route(x, [item.domain for item in items], tokenizer, router)
    finally:
        router.train(was_training)
    return {
        item.item_id: FusedLatent(fused.z_uni[i], fused.z_spec[i], fused.alpha[i], fused.z_fused[i])
        for i, item in enumerate(items)
    }


def assign_fused_sids(items, tokenizer, router):
    """
    Quantize every item's fused latent through the frozen codebooks.

    Returns:
        tuple: (item_id -> SemanticID, item_id -> FusedLatent)
    """
    routed = route_catalog(items, tokenizer, router)
    sid_map = assign_sids(items, tokenizer, latents={k: v.z_fused for k, v in routed.items()})
    return sid_map, routed


def write_routing_report(path, items, routed):
    """item_id, domain, alpha per line, sorted by item_id."""
    with open(path, 'w', encoding='utf-8') as handle:
        for item in sorted(items, key=lambda it: it.item_id):
            handle.write(f"{item.item_id}\t{item.domain}\t{float(routed[item.item_id].alpha):.6f}\n")


def dump_embeddings(path, items, routed):
    """One JSON object per line with z_uni, z_spec, z_fused and alpha for external plotting."""
    with open(path, 'w', encoding='utf-8') as handle:
        for item in sorted(items, key=lambda it: it.item_id):
            fused = routed[item.item_id]
            handle.write(json.dumps({
                'item_id': item.item_id,
                'domain': item.domain,
                'alpha': round(float(fused.alpha), 10),
                'z_uni': [round(v, 10) for v in fused.z_uni.tolist()],
                'z_spec': [round(v, 10) for v in fused.z_spec.tolist()],
                'z_fused': [round(v, 10) for v in fused.z_fused.tolist()],
            }, sort_keys=True) + '\n')
    logger.info(f"Wrote {len(items)} embedding rows to {path}")
