"""Evaluation: retrieval metrics, candidate-subset protocol, classification
metrics, and embedding export.

Ranking is deterministic: scores sort descending with ties broken by
ascending gallery id, so repeated evaluations are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import SplitData
from .errors import DataError
from .seeding import derive_rng
from .text import Vocabulary, tokenize

DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalIndex:
    """Unit-norm gallery feature matrix with ids and optional metadata."""

    features: np.ndarray  # (N, d), rows unit-norm
    ids: np.ndarray  # (N,) int64, unique
    subcategories: list | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(set(self.ids.tolist())) != len(self.ids):
            raise DataError("gallery ids must be unique")
        self._row_of = {int(i): r for r, i in enumerate(self.ids)}

    def row_of(self, gold_id: int) -> int:
        if int(gold_id) not in self._row_of:
            raise DataError(f"gold id {gold_id} missing from the gallery")
        return self._row_of[int(gold_id)]

    def __len__(self):
        return len(self.ids)


@dataclass
class EvalReport:
    protocol: str
    metrics: dict
    seeds: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "metrics": self.metrics, "seeds": self.seeds, "counts": self.counts}

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def _rank_with_tiebreak(scores: np.ndarray, ids: np.ndarray, gold_row: int) -> int:
    """0-based rank of the gold item: higher score first, lower id wins ties."""
    gs = scores[gold_row]
    gid = ids[gold_row]
    better = scores > gs
    tied = (scores == gs) & (ids < gid)
    return int(better.sum() + tied.sum())


def eval_recall_at_k(query_features: np.ndarray, gold_ids, index: RetrievalIndex, ks=DEFAULT_KS) -> EvalReport:
    """R@K = 100 * fraction of queries whose gold item ranks in the top K."""
    q = np.asarray(query_features, dtype=np.float32)
    gold_rows = [index.row_of(g) for g in gold_ids]
    scores = q @ index.features.T  # (Q, N)
    ranks = np.array([_rank_with_tiebreak(scores[i], index.ids, gold_rows[i]) for i in range(len(gold_rows))])
    metrics = {f"R@{k}": 100.0 * float((ranks < k).mean()) for k in ks}
    metrics["median_rank"] = float(np.median(ranks) + 1)
    return EvalReport(protocol="full", metrics=metrics, counts={"queries": len(gold_rows), "gallery": len(index)})


def eval_protocol_subset(
    query_features: np.ndarray,
    gold_ids,
    index: RetrievalIndex,
    n_negatives: int = 100,
    seed: int = 0,
    n_repeats: int = 5,
    ks=DEFAULT_KS,
) -> EvalReport:
    """Rank the gold item against n_negatives distractors drawn from the same
    subcategory as the gold item, averaged over n_repeats seeds."""
    if index.subcategories is None:
        raise DataError("subset protocol needs gallery subcategories")
    q = np.asarray(query_features, dtype=np.float32)
    gold_rows = np.array([index.row_of(g) for g in gold_ids])
    scores = q @ index.features.T
    subcats = np.array(index.subcategories)
    pools = {}
    for sc in set(index.subcategories):
        pools[sc] = np.flatnonzero(subcats == sc)

    per_seed = []
    short_queries = 0
    seeds = [seed + r for r in range(n_repeats)]
    for s in seeds:
        rng = derive_rng(s, "subset-protocol")
        ranks = []
        for i, gr in enumerate(gold_rows):
            pool = pools[subcats[gr]]
            pool = pool[pool != gr]
            take = min(n_negatives, len(pool))
            if take < n_negatives:
                short_queries += 1
            if take > 0:
                distractors = pool[rng.choice(len(pool), size=take, replace=False)]
                cand = np.concatenate([[gr], distractors])
            else:
                cand = np.array([gr])
            ranks.append(_rank_with_tiebreak(scores[i][cand], index.ids[cand], 0))
        ranks = np.array(ranks)
        per_seed.append({f"R@{k}": 100.0 * float((ranks < k).mean()) for k in ks})
    metrics = {f"R@{k}": float(np.mean([m[f"R@{k}"] for m in per_seed])) for k in ks}
    return EvalReport(
        protocol=f"subset-{n_negatives}",
        metrics=metrics,
        seeds=seeds,
        counts={"queries": len(gold_rows), "gallery": len(index), "short_candidate_queries": short_queries // n_repeats},
    )


def eval_classification(preds, labels) -> EvalReport:
    """Accuracy and unweighted macro-F1; classes absent from both predictions
    and labels are excluded from the macro mean."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0 or preds.shape != labels.shape:
        raise DataError("predictions and labels must be nonempty and aligned")
    acc = 100.0 * float((preds == labels).mean())
    f1s = []
    for cls in sorted(set(preds.tolist()) | set(labels.tolist())):
        tp = float(((preds == cls) & (labels == cls)).sum())
        fp = float(((preds == cls) & (labels != cls)).sum())
        fn = float(((preds != cls) & (labels == cls)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(100.0 * (2 * tp / denom) if denom > 0 else 0.0)
    return EvalReport(
        protocol="classification",
        metrics={"accuracy": acc, "macro_f1": float(np.mean(f1s))},
        counts={"examples": int(preds.size), "classes": len(f1s)},
    )


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

def _image_tensor(split: SplitData, rows) -> torch.Tensor:
    arr = split.images[np.asarray(rows)].transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).float()


@torch.no_grad()
def image_features(model, split: SplitData, rows, batch_size: int = 64) -> np.ndarray:
    """g(avg pooled image-encoder grid) per sample row."""
    model.eval()
    rows = list(rows)
    out = []
    for i in range(0, len(rows), batch_size):
        out.append(model.image_latent(_image_tensor(split, rows[i: i + batch_size])).numpy())
    return np.concatenate(out, axis=0)


@torch.no_grad()
def text_features(model, split: SplitData, vocab: Vocabulary, t_max: int, rows, batch_size: int = 64) -> np.ndarray:
    """f(avg pooled text-encoder states) per sample row."""
    model.eval()
    rows = list(rows)
    out = []
    for i in range(0, len(rows), batch_size):
        seqs = [tokenize(vocab, split.captions[r], t_max) for r in rows[i: i + batch_size]]
        ids = torch.from_numpy(np.stack([s.ids for s in seqs]))
        mask = torch.from_numpy(np.stack([s.attention_mask for s in seqs]))
        out.append(model.text_latent(ids, mask).numpy())
    return np.concatenate(out, axis=0)


@torch.no_grad()
def joint_features(model, split: SplitData, vocab: Vocabulary, t_max: int, rows, batch_size: int = 32) -> np.ndarray:
    """g(avg pooled fusion states) per sample row, no dropout."""
    model.eval()
    rows = list(rows)
    out = []
    for i in range(0, len(rows), batch_size):
        chunk = rows[i: i + batch_size]
        seqs = [tokenize(vocab, split.captions[r], t_max) for r in chunk]
        ids = torch.from_numpy(np.stack([s.ids for s in seqs]))
        mask = torch.from_numpy(np.stack([s.attention_mask for s in seqs]))
        patches = model.encode_image(_image_tensor(split, chunk))
        out.append(model.fusion_latent(ids, mask, patches).numpy())
    return np.concatenate(out, axis=0)


def export_embeddings(model, split: SplitData, vocab: Vocabulary, t_max: int, path) -> Path:
    """Three JSONL lines per sample (image, text, joint vectors)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(range(len(split)))
    img = image_features(model, split, rows)
    txt = text_features(model, split, vocab, t_max, rows)
    joint = joint_features(model, split, vocab, t_max, rows)
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            base = {
                "id": f"{int(split.product_ids[r])}_v{int(split.view_indices[r])}",
                "category": split.categories[r],
                "subcategory": split.subcategories[r],
            }
            for modality, mat in (("image", img), ("text", txt), ("joint", joint)):
                rec = dict(base)
                rec["modality"] = modality
                rec["vector"] = [float(x) for x in mat[r]]
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
