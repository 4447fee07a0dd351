"""Shared test utilities: directional finite-difference gradient checks and
small synthetic batches for the loss surfaces."""

import numpy as np
import torch

from fvl.model import ModelConfig, build_model
from fvl.pretrain import TaskBatch, sample_itm_pairs
from fvl.text import CLS_ID, PAD_ID


def fd_gradient_check(loss_fn, modules, n_random_dirs=5, eps=1e-6):
    """Compare autograd directional derivatives against central differences.

    Directions: the normalized gradient itself plus n_random_dirs random unit
    directions. Returns the max relative error. Everything must be float64.
    """
    params = [p for m in modules for p in m.parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]

    gen = torch.Generator().manual_seed(1234)
    directions = []
    gnorm = torch.sqrt(sum((g**2).sum() for g in grads))
    if float(gnorm) > 0:
        directions.append([g / gnorm for g in grads])
    for _ in range(n_random_dirs):
        u = [torch.randn(p.shape, generator=gen, dtype=torch.float64) for p in params]
        norm = torch.sqrt(sum((x**2).sum() for x in u))
        directions.append([x / norm for x in u])

    max_rel = 0.0
    for u in directions:
        with torch.no_grad():
            for p, x in zip(params, u):
                p.add_(eps * x)
        lp = float(loss_fn())
        with torch.no_grad():
            for p, x in zip(params, u):
                p.add_(-2 * eps * x)
        lm = float(loss_fn())
        with torch.no_grad():
            for p, x in zip(params, u):
                p.add_(eps * x)
        fd = (lp - lm) / (2 * eps)
        an = float(sum((g * x).sum() for g, x in zip(grads, u)))
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel


def tiny_f64_model(vocab_size=24, n_attributes=5, n_codes=6, seed=0):
    cfg = ModelConfig(
        vocab_size=vocab_size,
        image_size=8,
        grid=2,
        d_model=16,
        n_layers=2,
        n_heads=2,
        latent_dim=8,
        n_codes=n_codes,
        n_attributes=n_attributes,
        max_seq_len=32,
        dropout=0.0,
        base_channels=8,
    )
    model = build_model(cfg, seed=seed).double()
    model.eval()
    return model


def synthetic_batch(model, batch_size=3, n_words=4, seed=0):
    """Random but fixed TaskBatch covering every task's fields."""
    gen = torch.Generator().manual_seed(seed)
    cfg = model.config
    t = n_words + 1
    ids = torch.full((batch_size, t), PAD_ID, dtype=torch.long)
    ids[:, 0] = CLS_ID
    ids[:, 1:] = torch.randint(4, cfg.vocab_size, (batch_size, n_words), generator=gen)
    mask = torch.ones(batch_size, t, dtype=torch.long)
    images = torch.rand(batch_size, 3, cfg.image_size, cfg.image_size, generator=gen, dtype=torch.float64)
    second = torch.rand(batch_size, 3, cfg.image_size, cfg.image_size, generator=gen, dtype=torch.float64)

    k = cfg.n_patches
    batch = TaskBatch(task="synthetic", token_ids=ids, attention_mask=mask, images=images)
    batch.second_images = second
    batch.word_drop_mask = torch.rand(batch_size, t, generator=gen) < 0.2
    batch.word_drop_mask[:, 0] = False
    batch.patch_drop_mask = torch.rand(batch_size, k, generator=gen) < 0.2

    masked = ids.clone()
    labels = torch.zeros_like(ids)
    masked[:, 1] = 2  # [MASK]
    labels[:, 1] = ids[:, 1]
    batch.masked_token_ids = masked
    batch.mlm_labels = labels

    pm = torch.zeros(batch_size, k, dtype=torch.bool)
    pm[:, : max(1, k // 4)] = True
    batch.patch_mask = pm
    batch.code_grids = torch.randint(0, cfg.n_codes, (batch_size, k), generator=gen)

    targets = torch.zeros(batch_size, cfg.n_attributes, dtype=torch.float64)
    for b in range(batch_size):
        picks = torch.randperm(cfg.n_attributes, generator=gen)[:2]
        targets[b, picks] = 0.5
    batch.pac_targets = targets
    batch.pac_keep = torch.ones(batch_size, dtype=torch.bool)

    sim = torch.randn(batch_size, batch_size, generator=gen, dtype=torch.float64)
    batch.itm_pairs = sample_itm_pairs(sim, np.random.default_rng(seed))
    return batch
