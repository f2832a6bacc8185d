"""
Neural substrate shared by every trainable module of the pipeline.

This module provides:
- 64-bit tensors as the numeric carrier (the default dtype is set on import)
- LoRA-augmented linear maps with named adapters and weighted activation
- A small pre-norm transformer block built from LoRA-augmented linears
- An AdamW wrapper that refuses non-finite gradients
- A central-difference gradient checker
- Masked softmax for constrained decoding
- Seeded named random streams and parameter hashing for freeze contracts
"""

import math
import hashlib
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import (
    AdapterLookupError,
    ConstraintViolationError,
    DeterminismError,
    InputError,
    ShapeError,
    TrainingDivergenceError,
)

torch.set_default_dtype(torch.float64)

# Configure logging
logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass(frozen=True)
class RngSeed:
    """A 64-bit seed plus a stream label; equal pairs give equal draws."""

    seed: int
    label: str = 'default'

    def derived(self):
        digest = hashlib.sha256(f"{self.seed}:{self.label}".encode('utf-8')).digest()
        return int.from_bytes(digest[:8], 'little') & ((1 << 63) - 1)

    def child(self, label):
        return RngSeed(self.seed, f"{self.label}/{label}")

    def generator(self):
        generator = torch.Generator()
        generator.manual_seed(self.derived())
        return generator

    def numpy(self):
        return np.random.default_rng(self.derived())

    def seed_torch(self):
        """Seed torch's global stream (used by dropout layers)."""
        torch.manual_seed(self.derived())


def dense_matrix(values, rows, cols):
    """
    Build a row-major 64-bit matrix, checking length and finiteness.

    Raises:
        ShapeError: If values.length != rows*cols or any entry is not finite
    """
    flat = torch.as_tensor(values, dtype=DTYPE).reshape(-1)
    if flat.numel() != rows * cols:
        raise ShapeError(f"Expected {rows * cols} values for a {rows}x{cols} matrix, got {flat.numel()}")
    if not torch.isfinite(flat).all():
        raise ShapeError("Matrix entries must be finite")
    return flat.reshape(rows, cols).clone()


def xavier_uniform(shape, generator=None):
    fan_out, fan_in = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound


class LoraAdapter(nn.Module):
    """One low-rank (A, B) pair: delta(x) = scale * B (dropout(A x))."""

    def __init__(self, d_in, d_out, rank, alpha, dropout=0.0, generator=None):
        super().__init__()
        self.rank = rank
        self.alpha = float(alpha)
        self.scale = float(alpha) / rank
        self.A = nn.Parameter(xavier_uniform((rank, d_in), generator))
        self.B = nn.Parameter(torch.zeros(d_out, rank, dtype=DTYPE))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return F.linear(self.dropout(F.linear(x, self.A)), self.B) * self.scale


def _expand_weight(weight, like):
    if not torch.is_tensor(weight):
        return weight
    return weight.reshape(tuple(weight.shape) + (1,) * (like.dim() - weight.dim()))


class LoraLinear(nn.Module):
    """
    Linear map W0 x + b plus weighted low-rank adapter deltas.

    Adapters are attached by name; which ones contribute to a forward pass is
    controlled by the active set, a list of (adapter-name, mix-weight) pairs.
    Mix weights may be floats or tensors broadcastable over the leading
    (batch, position) axes of the input.
    """

    def __init__(self, d_in, d_out, bias=True, generator=None, zero_init=False):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        if zero_init:
            weight = torch.zeros(d_out, d_in, dtype=DTYPE)
        else:
            weight = xavier_uniform((d_out, d_in), generator)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE)) if bias else None
        self.adapters = nn.ModuleDict()
        self.frozen = False
        # active adapter sets are per thread
        self._local = threading.local()

    def add_adapter(self, name, rank, alpha, dropout=0.0, generator=None):
        """
        Attach a new adapter with zero-initialized B.

        Raises:
            ShapeError: If rank exceeds min(d_in, d_out)
            InputError: If the name is already attached
        """
        if rank < 1 or rank > min(self.d_in, self.d_out):
            raise ShapeError(
                f"Adapter rank {rank} must be in [1, {min(self.d_in, self.d_out)}] "
                f"for a {self.d_out}x{self.d_in} layer"
            )
        if name in self.adapters:
            raise InputError(f"Adapter '{name}' is already attached")
        self.adapters[name] = LoraAdapter(self.d_in, self.d_out, rank, alpha, dropout, generator)
        return self.adapters[name]

    def set_active(self, active):
        active = list(active or [])
        for name, _ in active:
            if name not in self.adapters:
                raise AdapterLookupError(f"Unknown adapter '{name}'", adapter=name)
        self._active = active

    @property
    def _active(self):
        return getattr(self._local, 'active', [])

    @_active.setter
    def _active(self, value):
        self._local.active = value

    @property
    def active(self):
        return list(self._active)

    def freeze(self):
        """Freeze W0 and b; adapters keep their own flags."""
        self.weight.requires_grad_(False)
        if self.bias is not None:
            self.bias.requires_grad_(False)
        self.frozen = True

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Expected input dimension {self.d_in}, got {x.shape[-1]}")
        out = F.linear(x, self.weight, self.bias)
        for name, weight in self._active:
            delta = self.adapters[name](x)
            out = out + _expand_weight(weight, delta) * delta
        return out


def lora_forward(layer, x, active=None):
    """
    Evaluate a LoRA-augmented linear map.

    Args:
        layer (LoraLinear): The layer
        x (Tensor): Input with trailing dimension d_in
        active (list, optional): (adapter-name, mix-weight) pairs; the
            layer's current active set when omitted

    Returns:
        Tensor: W0 x + b + sum of weight * scale * B (A x) over active adapters
    """
    if active is None:
        return layer(x)
    previous = layer.active
    layer.set_active(active)
    try:
        return layer(x)
    finally:
        layer._active = previous


def lora_layers(module):
    return [(name, m) for name, m in module.named_modules() if isinstance(m, LoraLinear)]


def set_active_adapters(module, active):
    for _, layer in lora_layers(module):
        layer.set_active([(n, w) for n, w in active if n in layer.adapters])
    missing = [n for n, _ in active if not any(n in l.adapters for _, l in lora_layers(module))]
    if missing:
        raise AdapterLookupError(f"Unknown adapter '{missing[0]}'", adapter=missing[0])


@contextmanager
def active_adapters(module, active):
    """Temporarily set the active adapters of every LoraLinear under module."""
    layers = lora_layers(module)
    previous = [layer.active for _, layer in layers]
    try:
        set_active_adapters(module, list(active))
        yield module
    finally:
        for (_, layer), prev in zip(layers, previous):
            layer._active = prev


def _target_matches(layer_name, targets):
    if targets in (None, 'all'):
        return True
    wanted = [t.strip() for t in str(targets).split(',') if t.strip()]
    leaf = layer_name.rsplit('.', 1)[-1]
    return leaf in wanted or layer_name in wanted


def attach_adapter(module, name, rank, alpha, dropout=0.0, generator=None, targets='all'):
    """
    Attach adapter `name` to every targeted LoraLinear under module.

    Ranks larger than a layer allows are clamped to min(d_in, d_out) with a
    warning; the scale then uses the effective rank.

    Returns:
        list: Names of the layers that received the adapter
    """
    attached = []
    for layer_name, layer in lora_layers(module):
        if not _target_matches(layer_name, targets):
            continue
        effective = min(rank, layer.d_in, layer.d_out)
        if effective != rank:
            logger.warning(
                f"Clamping adapter '{name}' rank {rank} -> {effective} on layer "
                f"'{layer_name}' ({layer.d_out}x{layer.d_in})"
            )
        layer.add_adapter(name, effective, alpha, dropout, generator)
        attached.append(layer_name)
    if not attached:
        raise InputError(f"Adapter '{name}' matched no layers for targets {targets!r}")
    return attached


def adapter_names(module):
    names = []
    for _, layer in lora_layers(module):
        for name in layer.adapters:
            if name not in names:
                names.append(name)
    return names


def adapter_parameters(module, name):
    """Named parameters of one adapter across all layers."""
    params = {}
    for layer_name, layer in lora_layers(module):
        if name in layer.adapters:
            for pname, p in layer.adapters[name].named_parameters():
                params[f"{layer_name}.adapters.{name}.{pname}"] = p
    if not params:
        raise AdapterLookupError(f"Unknown adapter '{name}'", adapter=name)
    return params


def freeze_module(module):
    """Set requires_grad=False everywhere and mark LoRA bases frozen."""
    for p in module.parameters():
        p.requires_grad_(False)
    for _, layer in lora_layers(module):
        layer.frozen = True


def make_trainable(named_params):
    """Mark the given parameters trainable and return them."""
    for p in named_params.values():
        p.requires_grad_(True)
    return named_params


def count_parameters(params):
    return int(sum(p.numel() for p in params))


def parameter_hash(module, include=None):
    """
    SHA-256 over parameter names and raw bytes.

    Args:
        module (nn.Module): Module to hash
        include (callable, optional): Predicate on the qualified parameter name
    """
    digest = hashlib.sha256()
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        if include is not None and not include(name):
            continue
        digest.update(name.encode('utf-8'))
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block; every linear is a LoraLinear."""

    def __init__(self, d_model, n_heads, d_ff, causal, dropout=0.0, generator=None):
        super().__init__()
        if d_model % n_heads:
            raise ShapeError(f"d_model {d_model} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.causal = causal
        self.ln1 = nn.LayerNorm(d_model)
        self.qkv = LoraLinear(d_model, 3 * d_model, generator=generator)
        self.proj = LoraLinear(d_model, d_model, generator=generator)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff1 = LoraLinear(d_model, d_ff, generator=generator)
        self.ff2 = LoraLinear(d_ff, d_model, generator=generator)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        batch, length, d_model = x.shape
        head_dim = d_model // self.n_heads
        qkv = self.qkv(self.ln1(x)).reshape(batch, length, 3, self.n_heads, head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
        if self.causal:
            future = torch.ones(length, length, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float('-inf'))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        y = (attn @ v).transpose(1, 2).reshape(batch, length, d_model)
        x = x + self.dropout(self.proj(y))
        return x + self.dropout(self.ff2(F.gelu(self.ff1(self.ln2(x)))))


class AdamW:
    """
    AdamW over named trainable parameters.

    Parameters with requires_grad=False at construction are never handed to
    the optimizer, so frozen weights cannot move.
    """

    def __init__(self, named_params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        items = named_params.items() if isinstance(named_params, dict) else named_params
        self.named_params = {name: p for name, p in items if p.requires_grad}
        if not self.named_params:
            raise InputError("AdamW received no trainable parameters")
        self.optimizer = torch.optim.AdamW(
            list(self.named_params.values()), lr=lr, betas=betas, eps=eps, weight_decay=weight_decay
        )
        self.steps = 0

    @property
    def lr(self):
        return self.optimizer.param_groups[0]['lr']

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=True)

    def step(self):
        """
        Apply one AdamW update.

        Raises:
            TrainingDivergenceError: If any gradient has a non-finite entry
        """
        for name, p in self.named_params.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                logger.error(f"Non-finite gradient for parameter {name} at step {self.steps + 1}")
                raise TrainingDivergenceError(
                    f"Non-finite gradient for parameter {name}", parameter=name
                )
        self.optimizer.step()
        self.steps += 1


def check_finite_loss(loss, stage, epoch):
    """Raise TrainingDivergenceError if a loss value is NaN or infinite."""
    value = float(loss.detach()) if torch.is_tensor(loss) else float(loss)
    if not math.isfinite(value):
        logger.error(f"{stage}: non-finite loss {value} at epoch {epoch}")
        raise TrainingDivergenceError(f"{stage} diverged at epoch {epoch}", epoch=epoch)
    return value


def _named(params):
    if isinstance(params, dict):
        return list(params.items())
    return [(f"param{i}", p) for i, p in enumerate(params)]


def grad_check(loss_fn, params, epsilon=1e-5, reference_fn=None, atol=1e-9,
               max_components=None, seed=0):
    """
    Compare analytic gradients with central finite differences.

    Args:
        loss_fn (callable): Zero-argument function returning a scalar tensor
        params (dict or list): Tensors (requires_grad=True) to check
        epsilon (float): Perturbation size, in (0, 1e-2]
        reference_fn (callable, optional): Function differenced numerically in
            place of loss_fn; for losses with stop-gradient or straight-through
            semantics it is the surrogate whose true gradient matches them
        atol (float): Absolute disagreement treated as round-off agreement
        max_components (int, optional): Check a seeded sample of entries per tensor
        seed (int): Seed for component sampling

    Returns:
        float: Maximum component-wise relative error (denominator floor 1e-12)

    Raises:
        DeterminismError: If loss_fn or reference_fn is not repeatable
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ValueError("epsilon must be in (0, 1e-2]")
    named = _named(params)
    reference_fn = reference_fn or loss_fn

    loss = loss_fn()
    with torch.no_grad():
        repeat = float(loss_fn())
    if float(loss) != repeat:
        raise DeterminismError(f"Loss is not deterministic: {float(loss)!r} != {repeat!r}")
    if reference_fn is not loss_fn:
        with torch.no_grad():
            first, second = float(reference_fn()), float(reference_fn())
        if first != second:
            raise DeterminismError(f"Reference loss is not deterministic: {first!r} != {second!r}")

    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    generator = torch.Generator().manual_seed(seed)
    worst = 0.0
    for (name, p), grad in zip(named, grads):
        analytic = torch.zeros_like(p) if grad is None else grad.detach()
        flat = p.detach().view(-1)
        analytic = analytic.reshape(-1)
        indices = range(flat.numel())
        if max_components is not None and flat.numel() > max_components:
            indices = sorted(torch.randperm(flat.numel(), generator=generator)[:max_components].tolist())
        param_worst = 0.0
        with torch.no_grad():
            for i in indices:
                original = flat[i].item()
                flat[i] = original + epsilon
                plus = float(reference_fn())
                flat[i] = original - epsilon
                minus = float(reference_fn())
                flat[i] = original
                numeric = (plus - minus) / (2.0 * epsilon)
                a = analytic[i].item()
                diff = abs(a - numeric)
                if diff <= atol:
                    continue
                param_worst = max(param_worst, diff / max(abs(a), abs(numeric), 1e-12))
        logger.debug(f"grad_check {name}: max relative error {param_worst:.3e}")
        worst = max(worst, param_worst)
    return worst


def _valid_index(valid, size):
    if torch.is_tensor(valid) and valid.dtype == torch.bool:
        if valid.shape[-1] != size:
            raise ShapeError(f"Mask length {valid.shape[-1]} does not match {size} logits")
        index = valid.nonzero().reshape(-1)
    else:
        index = torch.as_tensor(sorted(set(int(v) for v in valid)), dtype=torch.long)
    if index.numel() == 0:
        raise ConstraintViolationError("Masked softmax needs a non-empty valid set")
    if int(index.min()) < 0 or int(index.max()) >= size:
        raise ShapeError(f"Valid indices must lie in [0, {size})")
    return index


def masked_softmax(logits, valid):
    """
    Softmax restricted to a valid index set; exactly zero elsewhere.

    Args:
        logits (Tensor): 1-D logits
        valid (iterable or bool Tensor): Allowed indices

    Returns:
        Tensor: Probabilities summing to 1 over the valid set

    Raises:
        ConstraintViolationError: If the valid set is empty
    """
    logits = torch.as_tensor(logits, dtype=DTYPE)
    index = _valid_index(valid, logits.shape[-1])
    sub = logits.index_select(-1, index)
    sub = sub - sub.max(dim=-1, keepdim=True).values
    weights = torch.exp(sub)
    probs = weights / weights.sum(dim=-1, keepdim=True)
    return torch.zeros_like(logits).index_copy(-1, index, probs)


def masked_log_softmax(logits, valid):
    """Log of masked_softmax; -inf off the valid set."""
    logits = torch.as_tensor(logits, dtype=DTYPE)
    index = _valid_index(valid, logits.shape[-1])
    sub = logits.index_select(-1, index)
    log_probs = sub - torch.logsumexp(sub, dim=-1, keepdim=True)
    return torch.full_like(logits, float('-inf')).index_copy(-1, index, log_probs)
