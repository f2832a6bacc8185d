"""
Finite-difference checks of every training objective on tiny models.

Losses with stop-gradient or straight-through terms are compared against a
surrogate: the same loss with the detached quantities replaced by constants
captured at the checked point, so its true gradient is the gradient the
training code applies.
"""

import logging
from dataclasses import dataclass

import torch

from adapter_service import adapter_loss, fuse_latents, router_losses
from nn_core import DTYPE, RngSeed, active_adapters, adapter_parameters, attach_adapter, grad_check
from recommender_service import (
    SPECIALS,
    GenerativeRecommender,
    RecConfig,
    SidVocabulary,
    next_token_loss,
    pad_batch,
    specific_name,
    universal_forward,
    universal_parameters,
    user_router_losses,
)
from router import VibRouter, vib_kl
from tokenizer_service import PretrainConfig, RqVae, mtm_loss, residual_quantize, rq_losses, straight_through

# Configure logging
logger = logging.getLogger(__name__)

INPUT_DIM = 6
BATCH = 5
VIB_WEIGHT = 0.1
ROUND_OFF = 1e-9


@dataclass
class GradCheckCase:
    name: str
    loss_fn: object
    params: dict
    reference_fn: object = None


def _tiny_tokenizer(generator):
    config = PretrainConfig(
        levels=3, codebook_size=4, latent_dim=4, hidden_dim=8, hidden_layers=1,
        ctx_dim=8, ctx_layers=1, ctx_heads=2,
    )
    model = RqVae(INPUT_DIM, config, generator)
    model.eval()
    return model


def _randomize(params, generator, scale=0.1):
    """Give zero-initialized weights a value so gradients reach every layer."""
    with torch.no_grad():
        for p in params:
            p.copy_(torch.randn(p.shape, generator=generator, dtype=DTYPE) * scale)


def _const(t):
    return t.detach().clone()


def _reconstruction_case(rng):
    generator = rng.generator()
    model = _tiny_tokenizer(generator)
    x = torch.randn(BATCH, INPUT_DIM, generator=generator, dtype=DTYPE)
    mu, beta = 1.0, model.config.beta

    def loss():
        z = model.encode(x)
        entries = model.codebook_entries()
        codes, z_hat, residuals = residual_quantize(z, entries)
        l_rec, l_q = rq_losses(x, model.decode(straight_through(z, z_hat)), residuals, codes, entries, beta)
        return l_rec + mu * l_q

    with torch.no_grad():
        z0 = _const(model.encode(x))
        codes0, z_hat0, residuals0 = residual_quantize(z0, [_const(e) for e in model.codebook_entries()])
        residuals0 = [_const(r) for r in residuals0]
        chosen0 = [_const(e.index_select(0, codes0[:, d])) for d, e in enumerate(model.codebook_entries())]

    def surrogate():
        z = model.encode(x)
        l_rec = (x - model.decode(z_hat0 + (z - z0))).pow(2).sum(-1).mean()
        codebook_term = torch.zeros((), dtype=DTYPE)
        commitment_term = torch.zeros((), dtype=DTYPE)
        prefix = torch.zeros_like(z0)
        for d, entries in enumerate(model.codebook_entries()):
            codebook_term = codebook_term + (residuals0[d] - entries.index_select(0, codes0[:, d])).pow(2).sum(-1).mean()
            commitment_term = commitment_term + (z - prefix - chosen0[d]).pow(2).sum(-1).mean()
            prefix = prefix + chosen0[d]
        return l_rec + mu * (codebook_term + beta * commitment_term)

    params = {n: p for n, p in model.named_parameters() if not n.startswith('ctx_model.')}
    return GradCheckCase('tokenizer reconstruction + quantization', loss, params, surrogate)


def _masked_code_case(rng):
    generator = rng.generator()
    model = _tiny_tokenizer(generator)
    codes = torch.randint(0, model.config.codebook_size, (BATCH, model.config.levels), generator=generator)
    mask = torch.zeros_like(codes, dtype=torch.bool)
    mask[torch.arange(BATCH), torch.arange(BATCH) % model.config.levels] = True

    def loss():
        return mtm_loss(codes, mask, model.ctx_model, model.codebook_entries())

    params = {n: p for n, p in model.named_parameters() if n.startswith(('ctx_model.', 'codebooks.'))}
    return GradCheckCase('masked code modeling', loss, params)


def _item_adapter_case(rng):
    generator = rng.generator()
    model = _tiny_tokenizer(generator)
    name = 'item:A'
    attach_adapter(model.encoder, name, 2, 4.0, generator=generator)
    params = adapter_parameters(model.encoder, name)
    _randomize([p for n, p in params.items() if n.endswith('.B')], generator)
    x = torch.randn(BATCH, INPUT_DIM, generator=generator, dtype=DTYPE)

    def adapted():
        with active_adapters(model.encoder, [(name, 1.0)]):
            return model.encode(x)

    with torch.no_grad():
        z0 = _const(adapted())
        _, z_hat0, _ = residual_quantize(z0, model.codebook_entries())
        z_hat0 = _const(z_hat0)

    def surrogate():
        return (x - model.decode(z_hat0 + (adapted() - z0))).pow(2).sum(-1).mean()

    return GradCheckCase('item adapter (straight-through)', lambda: adapter_loss(x, model, name), params, surrogate)


def _item_router_case(rng):
    generator = rng.generator()
    model = _tiny_tokenizer(generator)
    latent = model.config.latent_dim
    router = VibRouter(INPUT_DIM, hidden=8, latent_dim=3, generator=generator)
    _randomize([router.logvar_head.weight], generator)
    router.train()
    x = torch.randn(BATCH, INPUT_DIM, generator=generator, dtype=DTYPE)
    z_uni = torch.randn(BATCH, latent, generator=generator, dtype=DTYPE)
    z_spec = torch.randn(BATCH, latent, generator=generator, dtype=DTYPE)
    noise = torch.randn(BATCH, 3, generator=generator, dtype=DTYPE)

    def loss():
        return router_losses(x, z_uni, z_spec, model, router, VIB_WEIGHT, noise=noise)['total']

    def fused_latent():
        alpha, m, s = router(x, noise=noise)
        return fuse_latents(z_uni, z_spec, alpha).z_fused, m, s

    with torch.no_grad():
        fused0 = _const(fused_latent()[0])
        _, z_hat0, _ = residual_quantize(fused0, model.codebook_entries())
        z_hat0 = _const(z_hat0)

    def surrogate():
        fused, m, s = fused_latent()
        l_rec = (x - model.decode(z_hat0 + (fused - fused0))).pow(2).sum(-1).mean()
        return l_rec + VIB_WEIGHT * vib_kl(m, s).mean()

    return GradCheckCase('item router (VIB, fixed noise)', loss, dict(router.named_parameters()), surrogate)


def _tiny_recommender(seed):
    vocab = SidVocabulary(['A', 'B'], [4, 4], 1)
    config = RecConfig(
        layers=1, d_model=8, heads=2, ff_dim=16, max_len=16, experts=2,
        expert_rank=2, expert_alpha=4.0, expert_dropout=0.0, specific_rank=2, specific_alpha=4.0,
    )
    model = GenerativeRecommender(vocab, config, seed)
    model.eval()
    return model


def _token_batch(model, generator):
    sequences = [
        torch.randint(SPECIALS, model.vocab.size, (length,), generator=generator).tolist()
        for length in (7, 5)
    ]
    tokens, _ = pad_batch(sequences)
    return tokens


def _universal_case(rng):
    generator = rng.generator()
    model = _tiny_recommender(rng.derived() % (1 << 31))
    params = universal_parameters(model)
    _randomize([model.backbone.head.weight] + [p for n, p in params.items() if n.endswith('.B')], generator)
    tokens = _token_batch(model, generator)

    def loss():
        logits, _, _ = universal_forward(tokens, model.backbone, model.mix)
        return next_token_loss(logits, tokens)

    return GradCheckCase('universal next-token (experts + gate)', loss, params)


def _specific_case(rng):
    generator = rng.generator()
    model = _tiny_recommender(rng.derived() % (1 << 31))
    name = specific_name('A')
    attach_adapter(model.backbone, name, 2, 4.0, generator=generator)
    params = adapter_parameters(model.backbone, name)
    _randomize([model.backbone.head.weight] + [p for n, p in params.items() if n.endswith('.B')], generator)
    tokens = _token_batch(model, generator)

    def loss():
        logits, _, _ = universal_forward(tokens, model.backbone, model.mix, extra=[(name, 1.0)])
        return next_token_loss(logits, tokens)

    return GradCheckCase('specific next-token (domain adapter)', loss, params)


def _user_router_case(rng, fusion_order):
    generator = rng.generator()
    n, steps, d_model = 6, 3, 8
    router = VibRouter(d_model, hidden=8, latent_dim=3, generator=generator)
    _randomize([router.logvar_head.weight], generator)
    router.train()
    u = 0.05 + 0.9 * torch.rand(n, steps, generator=generator, dtype=DTYPE)
    s = 0.05 + 0.9 * torch.rand(n, steps, generator=generator, dtype=DTYPE)
    targets = {
        'h': torch.randn(n, d_model, generator=generator, dtype=DTYPE),
        'u': u,
        's': s,
        'mass_u': u + (1.0 - u) * torch.rand(n, steps, generator=generator, dtype=DTYPE),
        'mass_s': s + (1.0 - s) * torch.rand(n, steps, generator=generator, dtype=DTYPE),
    }
    noise = torch.randn(n, 3, generator=generator, dtype=DTYPE)

    def loss():
        return user_router_losses(router, targets, VIB_WEIGHT, fusion_order, noise=noise)['total']

    return GradCheckCase(f'user router ({fusion_order})', loss, dict(router.named_parameters()))


def build_cases(seed=0):
    """One check per objective, each on its own tiny seeded model."""
    rng = RngSeed(seed, 'gradcheck')
    return [
        _reconstruction_case(rng.child('reconstruction')),
        _masked_code_case(rng.child('masked-code')),
        _item_adapter_case(rng.child('item-adapter')),
        _item_router_case(rng.child('item-router')),
        _universal_case(rng.child('universal')),
        _specific_case(rng.child('specific')),
        _user_router_case(rng.child('user-router'), 'mask_then_fuse'),
        _user_router_case(rng.child('user-router'), 'fuse_then_mask'),
    ]


def run_grad_checks(epsilon=1e-5, tolerance=1e-4, seed=0, max_components=24):
    """
    Run every case.

    Returns:
        list: Rows with loss, parameters, max_relative_error, tolerance and passed
    """
    rows = []
    for case in build_cases(seed):
        for p in case.params.values():
            p.requires_grad_(True)
        error = grad_check(
            case.loss_fn, case.params, epsilon, case.reference_fn,
            atol=ROUND_OFF, max_components=max_components, seed=seed,
        )
        passed = error <= tolerance
        rows.append({
            'loss': case.name,
            'parameters': sum(p.numel() for p in case.params.values()),
            'max_relative_error': error,
            'tolerance': tolerance,
            'passed': passed,
        })
        log = logger.info if passed else logger.error
        log(f"Gradient check {case.name}: max relative error {error:.3e} ({'ok' if passed else 'FAILED'})")
    return rows


def format_table(rows):
    lines = ["loss\tparameters\tmax_relative_error\ttolerance\tpassed"]
    for row in rows:
        lines.append(
            f"{row['loss']}\t{row['parameters']}\t{row['max_relative_error']:.3e}\t"
            f"{row['tolerance']:.1e}\t{'yes' if row['passed'] else 'no'}"
        )
    return "\n".join(lines) + "\n"
