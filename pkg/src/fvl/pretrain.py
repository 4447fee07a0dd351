"""Pre-training objectives and the one-task-per-iteration loop.

Each iteration samples a single task, builds a batch for that task only,
and optimizes that task's loss. Masking is conditional: a language-masking
batch keeps every patch intact, a patch-masking batch keeps the text
intact. All randomness for iteration k is derived statelessly from
(seed, k), so resumed runs replay the exact stream.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import SplitData, augment_view
from .errors import ConfigError, NumericError, TrainingError, UsageError
from .model import VLModel, pool
from .seeding import derive_rng, seed_torch
from .text import IGNORE_LABEL, PseudoAttributeSet, Vocabulary, mask_tokens, tokenize
from .vq import block_mask

logger = logging.getLogger(__name__)

TASKS = ("itc", "mvc", "pac", "mpfc", "mlm", "itm")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def infonce(sim: torch.Tensor, tau) -> torch.Tensor:
    """Mean over rows of -log softmax(sim/tau) at the diagonal positive."""
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise UsageError(f"similarity matrix must be square, got {tuple(sim.shape)}")
    if not torch.isfinite(sim).all():
        raise NumericError("non-finite similarity entries")
    logits = sim / tau
    targets = torch.arange(sim.shape[0], device=sim.device)
    return F.cross_entropy(logits, targets)


def symmetric_infonce(sim: torch.Tensor, tau) -> torch.Tensor:
    return 0.5 * (infonce(sim, tau) + infonce(sim.t(), tau))


@dataclass
class TaskBatch:
    """Everything a single task iteration consumes; built ahead of the loss
    so every loss is a deterministic function of the parameters."""

    task: str
    token_ids: torch.Tensor
    attention_mask: torch.Tensor
    images: torch.Tensor
    second_images: torch.Tensor | None = None
    word_drop_mask: torch.Tensor | None = None  # (B,T) bool, view-contrastive dropout
    patch_drop_mask: torch.Tensor | None = None  # (B,K) bool
    masked_token_ids: torch.Tensor | None = None
    mlm_labels: torch.Tensor | None = None
    patch_mask: torch.Tensor | None = None  # (B,K) bool, zeroed patches
    code_grids: torch.Tensor | None = None  # (B,K) long targets
    pac_targets: torch.Tensor | None = None  # (B,|A|)
    pac_keep: torch.Tensor | None = None  # (B,) bool
    itm_pairs: tuple | None = None  # (text_idx, image_idx, labels)


def loss_itc(model: VLModel, batch: TaskBatch):
    w = model.text_latent(batch.token_ids, batch.attention_mask)
    v = model.image_latent(batch.images)
    sim = w @ v.t()
    loss = symmetric_infonce(sim, model.tau)
    return loss, {"batch": sim.shape[0]}


def itc_similarity(model: VLModel, batch: TaskBatch) -> torch.Tensor:
    w = model.text_latent(batch.token_ids, batch.attention_mask)
    v = model.image_latent(batch.images)
    return w @ v.t()


def loss_mvc(model: VLModel, batch: TaskBatch):
    """Contrast the compositional [text; other-view] query against the
    original view's visual representation."""
    second_patches = model.encode_image(batch.second_images)
    q = model.fusion_latent(
        batch.token_ids,
        batch.attention_mask,
        second_patches,
        word_zero_mask=batch.word_drop_mask,
        patch_zero_mask=batch.patch_drop_mask,
    )
    v = model.image_latent(batch.images)
    sim = q @ v.t()
    loss = symmetric_infonce(sim, model.tau)
    return loss, {"batch": sim.shape[0]}


def loss_pac(model: VLModel, batch: TaskBatch):
    """Smoothed multi-label prediction from each unimodal representation via
    one shared classifier; samples without mined attributes are skipped."""
    keep = batch.pac_keep
    n_skipped = int((~keep).sum())
    if int(keep.sum()) == 0:
        return model.log_tau * 0.0, {"skipped": n_skipped, "text_term": 0.0, "image_term": 0.0}
    ids = batch.token_ids[keep]
    mask = batch.attention_mask[keep]
    images = batch.images[keep]
    targets = batch.pac_targets[keep]
    w_logits = model.head_attr(model.text_latent(ids, mask))
    v_logits = model.head_attr(model.image_latent(images))
    text_term = -(targets * F.log_softmax(w_logits, dim=-1)).sum(-1).mean()
    image_term = -(targets * F.log_softmax(v_logits, dim=-1)).sum(-1).mean()
    loss = text_term + image_term
    return loss, {"skipped": n_skipped, "text_term": float(text_term.detach()), "image_term": float(image_term.detach())}


def loss_mpfc(model: VLModel, batch: TaskBatch):
    """Classify the discrete code of each zeroed patch from the fusion
    encoder; text stays intact."""
    n_masked = int(batch.patch_mask.sum())
    if n_masked == 0:
        return model.log_tau * 0.0, {"masked": 0}
    patches = model.encode_image(batch.images)
    out = model.encode_fusion(
        batch.token_ids, batch.attention_mask, patches, patch_zero_mask=batch.patch_mask
    )
    t = batch.token_ids.shape[1]
    patch_states = out.states[:, t:, :]
    logits = model.head_mpfc(patch_states[batch.patch_mask])
    targets = batch.code_grids[batch.patch_mask]
    loss = F.cross_entropy(logits, targets)
    return loss, {"masked": n_masked}


def loss_mlm(model: VLModel, batch: TaskBatch):
    """Predict masked subwords from the fusion encoder; patches stay intact."""
    labeled = batch.mlm_labels != IGNORE_LABEL
    n_labeled = int(labeled.sum())
    if n_labeled == 0:
        return model.log_tau * 0.0, {"masked": 0}
    patches = model.encode_image(batch.images)
    out = model.encode_fusion(batch.masked_token_ids, batch.attention_mask, patches)
    t = batch.token_ids.shape[1]
    text_states = out.states[:, :t, :]
    logits = model.head_mlm(text_states[labeled])
    loss = F.cross_entropy(logits, batch.mlm_labels[labeled])
    return loss, {"masked": n_labeled}


def sample_itm_pairs(sim: torch.Tensor, rng: np.random.Generator, mine_both_sides: bool = False):
    """Mini-batch of ceil(B/2) matched and floor(B/2) mismatched pairs.

    Negative rows are chosen without replacement; each keeps its text and
    takes the non-matching image with the highest similarity in its row
    (the hardest in-batch candidate). With mine_both_sides, alternate rows
    instead keep their image and take the hardest non-matching text.
    """
    b = sim.shape[0]
    if b < 2:
        raise UsageError("hard-negative pairing needs a batch of >= 2")
    n_neg = b // 2
    neg_rows = np.sort(rng.choice(b, size=n_neg, replace=False))
    text_idx = list(range(b))
    image_idx = list(range(b))
    labels = [1.0] * b
    masked = sim.detach().clone()
    masked.fill_diagonal_(-torch.inf)
    for n, row in enumerate(neg_rows):
        if mine_both_sides and n % 2 == 1:
            text_idx[row] = int(masked[:, row].argmax())
        else:
            image_idx[row] = int(masked[row].argmax())
        labels[row] = 0.0
    return (
        torch.tensor(text_idx, dtype=torch.long),
        torch.tensor(image_idx, dtype=torch.long),
        torch.tensor(labels, dtype=sim.dtype),
    )


def binary_match_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of match logits against {0,1} labels."""
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def loss_itm(model: VLModel, batch: TaskBatch):
    """Binary match/mismatch classification on the fusion [CLS] state."""
    text_idx, image_idx, labels = batch.itm_pairs
    ids = batch.token_ids[text_idx]
    mask = batch.attention_mask[text_idx]
    patches = model.encode_image(batch.images[image_idx])
    out = model.encode_fusion(ids, mask, patches)
    logits = model.head_itm(pool(out, "cls")).squeeze(-1)
    loss = binary_match_loss(logits, labels)
    return loss, {"negatives": int((labels == 0).sum())}


LOSS_FNS = {
    "itc": loss_itc,
    "mvc": loss_mvc,
    "pac": loss_pac,
    "mpfc": loss_mpfc,
    "mlm": loss_mlm,
    "itm": loss_itm,
}


# ---------------------------------------------------------------------------
# Task schedule
# ---------------------------------------------------------------------------

@dataclass
class TaskSchedule:
    tasks: tuple = TASKS
    weights: tuple | None = None  # uniform when omitted

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("task schedule needs at least one task")
        for t in self.tasks:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r}")
        if self.weights is None:
            self.weights = tuple(1.0 / len(self.tasks) for _ in self.tasks)
        if len(self.weights) != len(self.tasks):
            raise ConfigError("weights must match tasks")
        if abs(sum(self.weights) - 1.0) > 1e-9 or any(w < 0 for w in self.weights):
            raise ConfigError("weights must be nonnegative and sum to 1")


def sample_task(schedule: TaskSchedule, rng: np.random.Generator) -> str:
    return schedule.tasks[int(rng.choice(len(schedule.tasks), p=schedule.weights))]


# ---------------------------------------------------------------------------
# Batch building
# ---------------------------------------------------------------------------

@dataclass
class BatchBuilderConfig:
    t_max: int = 16
    mlm_prob: float = 0.15
    view_dropout: float = 0.15
    mask_ratio: float = 0.25
    min_masked_patches: int = 4
    max_masked_patches: int = 8
    mask_aspect: tuple = (1 / 3, 3)


class BatchBuilder:
    """Assembles per-task batches from one loaded split.

    Captions are tokenized once up front. The second view for the
    view-contrastive task is a true different view when the product has
    several, otherwise a random crop/flip of the only view.
    """

    def __init__(
        self,
        split: SplitData,
        vocab: Vocabulary,
        attributes: PseudoAttributeSet,
        code_grids: np.ndarray | None,
        grid: int,
        config: BatchBuilderConfig | None = None,
        lexicon=None,
    ):
        self.split = split
        self.vocab = vocab
        self.attributes = attributes
        self.grid = grid
        self.cfg = config or BatchBuilderConfig()
        self.code_grids = code_grids
        self.lexicon = lexicon
        self.sequences = [tokenize(vocab, c, self.cfg.t_max) for c in split.captions]
        self.token_ids = np.stack([s.ids for s in self.sequences])
        self.attn = np.stack([s.attention_mask for s in self.sequences])
        if attributes is not None and lexicon is not None:
            from .text import smooth_targets

            self.pac_targets = np.stack(
                [smooth_targets(attributes.indices_for(c, lexicon), len(attributes)) for c in split.captions]
            )
            self.pac_keep = self.pac_targets.sum(axis=1) > 0
        else:
            self.pac_targets = None
            self.pac_keep = None
        self.product_ids = split.unique_product_ids

    def sample_rows(self, rng: np.random.Generator, batch_size: int):
        """One random view row per distinct product."""
        n = len(self.product_ids)
        pids = rng.choice(n, size=min(batch_size, n), replace=False)
        rows = []
        for i in pids:
            views = self.split.views_of[self.product_ids[int(i)]]
            rows.append(views[int(rng.integers(len(views)))])
        return np.array(rows, dtype=np.int64)

    def _images(self, rows) -> torch.Tensor:
        arr = self.split.images[rows].transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(arr)).float()

    def build(self, task: str, rng: np.random.Generator, batch_size: int) -> TaskBatch:
        rows = self.sample_rows(rng, batch_size)
        ids = torch.from_numpy(self.token_ids[rows])
        attn = torch.from_numpy(self.attn[rows])
        images = self._images(rows)
        batch = TaskBatch(task=task, token_ids=ids, attention_mask=attn, images=images)

        if task == "mvc":
            second = []
            for r in rows:
                pid = int(self.split.product_ids[r])
                views = self.split.views_of[pid]
                others = [v for v in views if v != r]
                if others:
                    second.append(self.split.images[others[int(rng.integers(len(others)))]])
                else:
                    second.append(augment_view(self.split.images[r], rng))
            second_arr = np.stack(second).transpose(0, 3, 1, 2)
            batch.second_images = torch.from_numpy(np.ascontiguousarray(second_arr)).float()
            t = ids.shape[1]
            word_drop = np.zeros((len(rows), t), dtype=bool)
            for b, r in enumerate(rows):
                for start, end in self.sequences[r].word_spans:
                    if rng.random() < self.cfg.view_dropout:
                        word_drop[b, start:end] = True
            k = self.grid * self.grid
            patch_drop = rng.random((len(rows), k)) < self.cfg.view_dropout
            batch.word_drop_mask = torch.from_numpy(word_drop)
            batch.patch_drop_mask = torch.from_numpy(patch_drop)
        elif task == "mlm":
            masked_ids = []
            labels = []
            for r in rows:
                m = mask_tokens(self.sequences[r], self.cfg.mlm_prob, rng, self.vocab)
                masked_ids.append(m.ids)
                labels.append(m.labels)
            batch.masked_token_ids = torch.from_numpy(np.stack(masked_ids))
            batch.mlm_labels = torch.from_numpy(np.stack(labels))
        elif task == "mpfc":
            if self.code_grids is None:
                raise UsageError("patch-classification batches need an offline code cache")
            masks = []
            for _ in rows:
                bm = block_mask(
                    (self.grid, self.grid),
                    ratio=self.cfg.mask_ratio,
                    min_patches=self.cfg.min_masked_patches,
                    max_patches=self.cfg.max_masked_patches,
                    aspect=self.cfg.mask_aspect,
                    rng=rng,
                )
                masks.append(bm.mask.reshape(-1))
            batch.patch_mask = torch.from_numpy(np.stack(masks))
            batch.code_grids = torch.from_numpy(
                self.code_grids[rows].reshape(len(rows), -1).astype(np.int64)
            )
        elif task == "pac":
            if self.pac_targets is None:
                raise UsageError("attribute batches need a mined attribute set")
            batch.pac_targets = torch.from_numpy(self.pac_targets[rows]).float()
            batch.pac_keep = torch.from_numpy(self.pac_keep[rows])
        elif task == "itm":
            pass  # pairs are mined from the similarity matrix inside the step
        elif task != "itc":
            raise ConfigError(f"unknown task {task!r}")
        return batch


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class LoopConfig:
    iterations: int = 600
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    warmup_frac: float = 0.125
    warmup_factor: float = 0.25
    milestone_fracs: tuple = (0.375, 0.75)
    decay_ratio: float = 0.1
    checkpoint_interval: int = 0  # 0: only final
    itm_mine_both_sides: bool = False


def lr_at(iteration: int, cfg: LoopConfig) -> float:
    """Warmup then multi-step decay, all relative to the iteration budget."""
    total = max(cfg.iterations, 1)
    warmup = int(round(cfg.warmup_frac * total))
    if warmup > 0 and iteration < warmup:
        alpha = iteration / warmup
        return cfg.lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * alpha)
    lr = cfg.lr
    for frac in cfg.milestone_fracs:
        if iteration >= int(round(frac * total)):
            lr *= cfg.decay_ratio
    return lr


def make_optimizer(model: VLModel, cfg: LoopConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def optimizer_tensors(model: VLModel, optimizer) -> dict:
    out = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        out[f"optim.{name}.exp_avg"] = state["exp_avg"]
        out[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"]
        out[f"optim.{name}.step"] = state["step"].reshape(1) if state["step"].ndim == 0 else state["step"]
    return out


def restore_optimizer(model: VLModel, optimizer, tensors: dict) -> None:
    for name, p in model.named_parameters():
        key = f"optim.{name}.exp_avg"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.from_numpy(tensors[f"optim.{name}.step"]).reshape(()),
            "exp_avg": torch.from_numpy(tensors[key]).reshape(p.shape),
            "exp_avg_sq": torch.from_numpy(tensors[f"optim.{name}.exp_avg_sq"]).reshape(p.shape),
        }


class MetricsWriter:
    """Append-only JSON lines, one object per training iteration."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def train_step(model, builder, optimizer, schedule, loop_cfg, seed, iteration):
    """One deterministic iteration: derive rngs, sample task, build batch,
    step. Returns (task, loss value, extras)."""
    rng = derive_rng(seed, "iter", iteration)
    seed_torch(seed, "iter-torch", iteration)
    task = sample_task(schedule, rng)
    batch = builder.build(task, rng, loop_cfg.batch_size)
    if task == "itm":
        with torch.no_grad():
            sim = itc_similarity(model, batch)
        batch.itm_pairs = sample_itm_pairs(sim, rng, loop_cfg.itm_mine_both_sides)

    lr = lr_at(iteration, loop_cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    loss, extras = LOSS_FNS[task](model, batch)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite {task} loss at iteration {iteration}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return task, float(loss.detach()), {"lr": lr, **extras}


def run_pretraining(
    model: VLModel,
    builder: BatchBuilder,
    schedule: TaskSchedule,
    loop_cfg: LoopConfig,
    seed: int,
    out_dir,
    config_hash: str = "",
    start_iteration: int = 0,
    optimizer=None,
    metrics_name: str = "metrics.jsonl",
):
    """Runs the loop from start_iteration to loop_cfg.iterations; returns the
    final checkpoint path. Saves periodic checkpoints and aborts (keeping the
    last good one) if a loss goes non-finite."""
    from .checkpoint import save_checkpoint

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = MetricsWriter(out_dir / metrics_name)
    optimizer = optimizer or make_optimizer(model, loop_cfg)
    model.train()

    def save(path, iteration):
        tensors = {f"model.{k}": v for k, v in model.state_tensors().items()}
        tensors.update(optimizer_tensors(model, optimizer))
        save_checkpoint(path, tensors, config_hash=config_hash, extras={"iteration": iteration, "kind": "pretrain"})

    last_good = out_dir / "ckpt_init.fvl"
    save(last_good, start_iteration)
    t0 = time.time()
    for it in range(start_iteration, loop_cfg.iterations):
        try:
            task, loss_val, extras = train_step(model, builder, optimizer, schedule, loop_cfg, seed, it)
        except NumericError as e:
            logger.error("aborting: %s (last good checkpoint: %s)", e, last_good)
            raise TrainingError(f"{e}; last good checkpoint: {last_good}") from e
        metrics.write(
            {
                "iteration": it,
                "task": task,
                "loss": loss_val,
                "tau": float(model.tau.detach()),
                "lr": extras["lr"],
                "wall_ms": round((time.time() - t0) * 1000.0, 3),
            }
        )
        if loop_cfg.checkpoint_interval and (it + 1) % loop_cfg.checkpoint_interval == 0:
            path = out_dir / f"ckpt_{it + 1:06d}.fvl"
            save(path, it + 1)
            last_good = path
    final = out_dir / "ckpt_final.fvl"
    save(final, loop_cfg.iterations)
    return final
