"""Downstream adapters: cross-modal retrieval, text-guided image retrieval,
(sub)category recognition (single- and multi-image), and outfit
complementary-item retrieval, each with its fine-tuning loss and its
evaluation protocol.

All loops reuse the pre-training LR schedule and the stateless per-iteration
seeding, so fine-tuning runs are exactly reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import SplitData
from .errors import DataError, NumericError, TrainingError, UsageError
from .evaluate import (
    EvalReport,
    RetrievalIndex,
    _rank_with_tiebreak,
    eval_classification,
    eval_protocol_subset,
    eval_recall_at_k,
    image_features,
    text_features,
)
from .model import VLModel, pool
from .pretrain import LoopConfig, MetricsWriter, infonce, lr_at, make_optimizer
from .seeding import derive_rng, seed_torch
from .text import Vocabulary, tokenize

logger = logging.getLogger(__name__)

FINETUNE_TASKS = ("retrieval", "tgir", "cr", "scr", "mscr", "ocir")


def _tokenize_batch(vocab, texts, t_max):
    seqs = [tokenize(vocab, t, t_max) for t in texts]
    ids = torch.from_numpy(np.stack([s.ids for s in seqs]))
    mask = torch.from_numpy(np.stack([s.attention_mask for s in seqs]))
    return ids, mask


def _images(split: SplitData, rows) -> torch.Tensor:
    arr = split.images[np.asarray(rows, dtype=np.int64)].transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).float()


def reset_temperature(module, tau_init: float = 0.625) -> None:
    with torch.no_grad():
        module.log_tau.fill_(float(np.log(tau_init)))


# Pure per-batch losses (the training loops below feed these; gradient
# checks drive them directly).

def retrieval_loss(model: VLModel, ids, mask, images):
    w = model.text_latent(ids, mask)
    v = model.image_latent(images)
    sim = w @ v.t()
    return 0.5 * (infonce(sim, model.tau) + infonce(sim.t(), model.tau))


def tgir_loss(model: VLModel, ids, mask, ref_images, tgt_images):
    """Batch-based classification: composed query against the in-batch
    target gallery."""
    ref_patches = model.encode_image(ref_images)
    q = model.fusion_latent(ids, mask, ref_patches)
    t = model.image_latent(tgt_images)
    return infonce(q @ t.t(), model.tau)


def classification_loss(model: VLModel, head, ids, mask, patch_sets, set_mask, targets):
    out = model.encode_fusion(ids, mask, patch_sets, set_mask=set_mask)
    return F.cross_entropy(head(pool(out, "cls")), targets)


def ocir_loss(model: VLModel, head, query_images, target_images, cond_idx, target_cond_idx):
    feats_q = model.image_pooled(model.encode_image(query_images))
    feats_t = model.image_pooled(model.encode_image(target_images))
    q = head(feats_q, cond_idx)
    t = head(feats_t, target_cond_idx)
    return infonce(q @ t.t(), head.tau)


def _loop(n_iterations, loop_cfg, optimizer, seed, step_fn, metrics_path=None, tag=""):
    metrics = MetricsWriter(metrics_path) if metrics_path else None
    import time

    t0 = time.time()
    for it in range(n_iterations):
        rng = derive_rng(seed, f"ft-{tag}", it)
        seed_torch(seed, f"ft-{tag}-torch", it)
        lr = lr_at(it, loop_cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        loss = step_fn(rng)
        if loss is None:
            continue
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite {tag} fine-tuning loss at iteration {it}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if metrics:
            metrics.write(
                {
                    "iteration": it,
                    "task": tag,
                    "loss": float(loss.detach()),
                    "lr": lr,
                    "wall_ms": round((time.time() - t0) * 1000.0, 3),
                }
            )


# ---------------------------------------------------------------------------
# Cross-modal retrieval (two-stream contrastive)
# ---------------------------------------------------------------------------

def finetune_retrieval(model: VLModel, split: SplitData, vocab: Vocabulary, t_max: int,
                       loop_cfg: LoopConfig, seed: int, metrics_path=None) -> VLModel:
    """Two-stream contrastive fine-tuning; the learnable temperature restarts
    at 0.625."""
    reset_temperature(model)
    model.train()
    optimizer = make_optimizer(model, loop_cfg)
    pids = split.unique_product_ids

    def step(rng):
        take = min(loop_cfg.batch_size, len(pids))
        chosen = rng.choice(len(pids), size=take, replace=False)
        rows = []
        for i in chosen:
            views = split.views_of[pids[int(i)]]
            rows.append(views[int(rng.integers(len(views)))])
        ids, mask = _tokenize_batch(vocab, [split.captions[r] for r in rows], t_max)
        return retrieval_loss(model, ids, mask, _images(split, rows))

    _loop(loop_cfg.iterations, loop_cfg, optimizer, seed, step, metrics_path, tag="retrieval")
    model.eval()
    return model


def evaluate_retrieval(model: VLModel, split: SplitData, vocab: Vocabulary, t_max: int,
                       ks=(1, 5, 10), protocol: str = "full", n_negatives: int = 100,
                       seed: int = 0, n_repeats: int = 5) -> dict:
    """Product-level image-to-text and text-to-image retrieval reports."""
    pids = split.unique_product_ids
    rows = [split.primary_sample(p) for p in pids]
    img = image_features(model, split, rows)
    txt = text_features(model, split, vocab, t_max, rows)
    subcats = [split.subcategories[r] for r in rows]
    ids = np.array(pids, dtype=np.int64)
    img_index = RetrievalIndex(features=img, ids=ids, subcategories=subcats)
    txt_index = RetrievalIndex(features=txt, ids=ids, subcategories=subcats)
    if protocol == "full":
        itr = eval_recall_at_k(img, ids, txt_index, ks)
        tir = eval_recall_at_k(txt, ids, img_index, ks)
    elif protocol == "subset":
        itr = eval_protocol_subset(img, ids, txt_index, n_negatives, seed, n_repeats, ks)
        tir = eval_protocol_subset(txt, ids, img_index, n_negatives, seed, n_repeats, ks)
    else:
        raise UsageError(f"unknown retrieval protocol {protocol!r}")
    return {"itr": itr, "tir": tir}


# ---------------------------------------------------------------------------
# Text-guided image retrieval (composed query -> image gallery)
# ---------------------------------------------------------------------------

def _triplet_rows(split: SplitData, triplets):
    refs, tgts = [], []
    for t in triplets:
        refs.append(split.sample_index[(t.reference_id, t.reference_view)])
        tgts.append(split.sample_index[(t.target_id, t.target_view)])
    return np.array(refs), np.array(tgts)


def finetune_tgir(model: VLModel, split: SplitData, vocab: Vocabulary, t_max: int,
                  loop_cfg: LoopConfig, seed: int, metrics_path=None) -> VLModel:
    """Early-fusion composed query against the in-batch target gallery
    (batch-based classification loss)."""
    if not split.triplets:
        raise DataError("no triplets available for composed-retrieval fine-tuning")
    reset_temperature(model)
    model.train()
    optimizer = make_optimizer(model, loop_cfg)
    refs, tgts = _triplet_rows(split, split.triplets)
    texts = [t.modification_text for t in split.triplets]

    def step(rng):
        take = min(loop_cfg.batch_size, len(refs))
        chosen = rng.choice(len(refs), size=take, replace=False)
        if take < 2:
            logger.warning("composed-retrieval batch of %d gives zero loss", take)
            return None
        ids, mask = _tokenize_batch(vocab, [texts[i] for i in chosen], t_max)
        return tgir_loss(model, ids, mask, _images(split, refs[chosen]), _images(split, tgts[chosen]))

    _loop(loop_cfg.iterations, loop_cfg, optimizer, seed, step, metrics_path, tag="tgir")
    model.eval()
    return model


@torch.no_grad()
def evaluate_tgir(model: VLModel, split: SplitData, vocab: Vocabulary, t_max: int,
                  ks=(1, 5, 10), batch_size: int = 32) -> EvalReport:
    """Rank every test product's image against each composed query."""
    if not split.triplets:
        raise DataError("no triplets available for composed-retrieval evaluation")
    model.eval()
    pids = split.unique_product_ids
    gallery_rows = [split.primary_sample(p) for p in pids]
    gallery = image_features(model, split, gallery_rows)
    index = RetrievalIndex(features=gallery, ids=np.array(pids, dtype=np.int64))
    refs, _ = _triplet_rows(split, split.triplets)
    texts = [t.modification_text for t in split.triplets]
    gold = [t.target_id for t in split.triplets]
    queries = []
    for i in range(0, len(refs), batch_size):
        ids, mask = _tokenize_batch(vocab, texts[i: i + batch_size], t_max)
        patches = model.encode_image(_images(split, refs[i: i + batch_size]))
        queries.append(model.fusion_latent(ids, mask, patches).numpy())
    report = eval_recall_at_k(np.concatenate(queries, axis=0), gold, index, ks)
    report.protocol = "tgir-full"
    return report


# ---------------------------------------------------------------------------
# Category / subcategory recognition
# ---------------------------------------------------------------------------

class ClassificationHead(nn.Module):
    def __init__(self, d_model: int, n_classes: int):
        super().__init__()
        self.linear = nn.Linear(d_model, n_classes)

    def forward(self, cls_state):
        return self.linear(cls_state)


def _product_views_batch(model, split, pids, max_views):
    """Stacked per-product patch sets padded to max_views, with a set mask."""
    sets, set_mask = [], []
    all_rows = []
    for pid in pids:
        rows = split.views_of[pid][:max_views]
        all_rows.extend(rows)
    patches_flat = model.encode_image(_images(split, all_rows))
    k, d = patches_flat.shape[1], patches_flat.shape[2]
    cursor = 0
    for pid in pids:
        rows = split.views_of[pid][:max_views]
        n = len(rows)
        block = patches_flat[cursor: cursor + n]
        cursor += n
        if n < max_views:
            pad = torch.zeros(max_views - n, k, d, dtype=block.dtype)
            block = torch.cat([block, pad], dim=0)
        sets.append(block)
        set_mask.append([1] * n + [0] * (max_views - n))
    return torch.stack(sets), torch.tensor(set_mask)


def classification_logits(model: VLModel, head: ClassificationHead, split: SplitData,
                          vocab: Vocabulary, t_max: int, pids, rows, multi_image: bool,
                          max_views: int = 4):
    texts = [split.captions[r] for r in rows]
    ids, mask = _tokenize_batch(vocab, texts, t_max)
    if multi_image:
        sets, set_mask = _product_views_batch(model, split, pids, max_views)
        out = model.encode_fusion(ids, mask, sets, set_mask=set_mask)
    else:
        patches = model.encode_image(_images(split, rows))
        out = model.encode_fusion(ids, mask, patches)
    return head(pool(out, "cls"))


def finetune_classification(model: VLModel, split: SplitData, vocab: Vocabulary, t_max: int,
                            labels: list, level: str, multi_image: bool,
                            loop_cfg: LoopConfig, seed: int, metrics_path=None):
    """Cross-entropy on the fusion [CLS] state; multi_image concatenates all
    view patch blocks per product."""
    if level not in ("category", "subcategory"):
        raise UsageError(f"unknown classification level {level!r}")
    label_index = {lab: i for i, lab in enumerate(labels)}
    head = ClassificationHead(model.config.d_model, len(labels))
    seed_torch(seed, "cls-head")
    with torch.no_grad():
        head.linear.weight.normal_(0, 0.02)
        head.linear.bias.zero_()
    model.train()
    head.train()
    optimizer = torch.optim.AdamW(
        list(model.parameters()) + list(head.parameters()),
        lr=loop_cfg.lr, betas=loop_cfg.betas, weight_decay=loop_cfg.weight_decay,
    )
    pids = split.unique_product_ids
    attr = "categories" if level == "category" else "subcategories"

    def label_of(row):
        name = getattr(split, attr)[row]
        if name not in label_index:
            raise DataError(f"unknown {level} label {name!r}")
        return label_index[name]

    def step(rng):
        take = min(loop_cfg.batch_size, len(pids))
        chosen = rng.choice(len(pids), size=take, replace=False)
        batch_pids = [pids[int(i)] for i in chosen]
        rows = []
        for pid in batch_pids:
            views = split.views_of[pid]
            rows.append(views[int(rng.integers(len(views)))])
        logits = classification_logits(model, head, split, vocab, t_max, batch_pids, rows, multi_image)
        targets = torch.tensor([label_of(r) for r in rows], dtype=torch.long)
        return F.cross_entropy(logits, targets)

    tag = "mscr" if multi_image else ("cr" if level == "category" else "scr")
    _loop(loop_cfg.iterations, loop_cfg, optimizer, seed, step, metrics_path, tag=tag)
    model.eval()
    head.eval()
    return model, head


@torch.no_grad()
def evaluate_classification_task(model: VLModel, head: ClassificationHead, split: SplitData,
                                 vocab: Vocabulary, t_max: int, labels: list, level: str,
                                 multi_image: bool, batch_size: int = 32) -> EvalReport:
    model.eval()
    head.eval()
    label_index = {lab: i for i, lab in enumerate(labels)}
    pids = split.unique_product_ids
    attr = "categories" if level == "category" else "subcategories"
    preds, golds = [], []
    for i in range(0, len(pids), batch_size):
        chunk = pids[i: i + batch_size]
        rows = [split.primary_sample(p) for p in chunk]
        logits = classification_logits(model, head, split, vocab, t_max, chunk, rows, multi_image)
        preds.extend(logits.argmax(dim=-1).tolist())
        for r in rows:
            name = getattr(split, attr)[r]
            if name not in label_index:
                raise DataError(f"unknown {level} label {name!r}")
            golds.append(label_index[name])
    report = eval_classification(np.array(preds), np.array(golds))
    report.protocol = f"classification-{level}{'-multiview' if multi_image else ''}"
    return report


# ---------------------------------------------------------------------------
# Outfit complementary item retrieval (image tower only)
# ---------------------------------------------------------------------------

class OcirHead(nn.Module):
    """Target-category-conditioned projection over image-encoder features."""

    def __init__(self, n_categories: int, d_model: int, latent_dim: int):
        super().__init__()
        self.proj = nn.Parameter(torch.empty(n_categories, latent_dim, d_model))
        nn.init.normal_(self.proj, std=0.02)
        self.log_tau = nn.Parameter(torch.tensor(float(np.log(0.625))))

    @property
    def tau(self):
        return self.log_tau.exp()

    def forward(self, feats: torch.Tensor, category_idx: torch.Tensor) -> torch.Tensor:
        w = self.proj[category_idx]  # (B, latent, d_model)
        y = torch.bmm(w, feats.unsqueeze(-1)).squeeze(-1)
        return y / (y.norm(dim=-1, keepdim=True) + 1e-12)


def _outfit_pairs(split: SplitData):
    pairs = []
    for o in split.outfits:
        items = list(o.item_product_ids)
        if len(items) < 2:
            continue
        for a in items:
            for b in items:
                if a != b:
                    pairs.append((a, b))
    return pairs


def finetune_ocir(model: VLModel, split: SplitData, categories: list,
                  loop_cfg: LoopConfig, seed: int, metrics_path=None,
                  catalog_negatives: int = 0):
    """Contrastive compatibility over in-batch candidates; only the image
    encoder (plus the conditioned head) trains. catalog_negatives > 0 mixes
    that many catalog-wide items into every candidate gallery."""
    pairs = _outfit_pairs(split)
    if not pairs:
        raise DataError("no outfit pairs available for compatibility fine-tuning")
    cat_index = {c: i for i, c in enumerate(categories)}
    seed_torch(seed, "ocir-head")
    head = OcirHead(len(categories), model.config.d_model, model.config.latent_dim)
    model.train()
    head.train()
    params = list(model.image_encoder.parameters()) + list(head.parameters())
    optimizer = torch.optim.AdamW(params, lr=loop_cfg.lr, betas=loop_cfg.betas,
                                  weight_decay=loop_cfg.weight_decay)
    all_pids = split.unique_product_ids

    def category_of(pid):
        return cat_index[split.categories[split.primary_sample(pid)]]

    def step(rng):
        take = min(loop_cfg.batch_size, len(pairs))
        chosen = rng.choice(len(pairs), size=take, replace=False)
        q_rows, t_rows, conds, t_conds = [], [], [], []
        for i in chosen:
            a, b = pairs[int(i)]
            q_rows.append(split.primary_sample(a))
            t_rows.append(split.primary_sample(b))
            conds.append(category_of(b))
            t_conds.append(category_of(b))
        if catalog_negatives > 0:
            extra = rng.choice(len(all_pids), size=min(catalog_negatives, len(all_pids)), replace=False)
            for i in extra:
                pid = all_pids[int(i)]
                t_rows.append(split.primary_sample(pid))
                t_conds.append(category_of(pid))
            feats_q = model.image_pooled(model.encode_image(_images(split, q_rows)))
            feats_t = model.image_pooled(model.encode_image(_images(split, t_rows)))
            q = head(feats_q, torch.tensor(conds, dtype=torch.long))
            t = head(feats_t, torch.tensor(t_conds, dtype=torch.long))
            logits = (q @ t.t()) / head.tau
            targets = torch.arange(len(q_rows))
            return F.cross_entropy(logits, targets)
        return ocir_loss(model, head, _images(split, q_rows), _images(split, t_rows),
                         torch.tensor(conds, dtype=torch.long), torch.tensor(t_conds, dtype=torch.long))

    _loop(loop_cfg.iterations, loop_cfg, optimizer, seed, step, metrics_path, tag="ocir")
    model.eval()
    head.eval()
    return model, head


@torch.no_grad()
def evaluate_ocir(model: VLModel, head: OcirHead, split: SplitData, categories: list,
                  ks=(1, 5, 10), batch_size: int = 64) -> EvalReport:
    """For each test outfit pair, rank the true complement inside the gallery
    of same-category items."""
    pairs = _outfit_pairs(split)
    if not pairs:
        raise DataError("no outfit pairs available for compatibility evaluation")
    model.eval()
    head.eval()
    cat_index = {c: i for i, c in enumerate(categories)}
    pids = split.unique_product_ids
    rows = [split.primary_sample(p) for p in pids]
    feats = []
    for i in range(0, len(rows), batch_size):
        feats.append(model.image_pooled(model.encode_image(_images(split, rows[i: i + batch_size]))))
    feats = torch.cat(feats, dim=0)
    cat_of_pid = {p: split.categories[split.primary_sample(p)] for p in pids}

    galleries = {}
    for c in categories:
        members = [i for i, p in enumerate(pids) if cat_of_pid[p] == c]
        if not members:
            continue
        idx = torch.tensor([cat_index[c]] * len(members), dtype=torch.long)
        g = head(feats[members], idx).numpy()
        galleries[c] = (np.array([pids[m] for m in members], dtype=np.int64), g)

    ranks = []
    for a, b in pairs:
        c = cat_of_pid[b]
        gallery_ids, gallery = galleries[c]
        qa = head(feats[pids.index(a)].unsqueeze(0), torch.tensor([cat_index[c]])).numpy()[0]
        scores = gallery @ qa
        gold_row = int(np.flatnonzero(gallery_ids == b)[0])
        ranks.append(_rank_with_tiebreak(scores, gallery_ids, gold_row))
    ranks = np.array(ranks)
    metrics = {f"R@{k}": 100.0 * float((ranks < k).mean()) for k in ks}
    return EvalReport(protocol="ocir-category-gallery", metrics=metrics,
                      counts={"queries": len(pairs), "gallery_products": len(pids)})
