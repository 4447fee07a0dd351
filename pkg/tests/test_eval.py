"""Retrieval metrics, subset protocol, classification metrics, export."""

import json

import numpy as np
import pytest

from fvl.errors import DataError
from fvl.evaluate import (
    EvalReport,
    RetrievalIndex,
    eval_classification,
    eval_protocol_subset,
    eval_recall_at_k,
    export_embeddings,
)
from fvl.seeding import derive_rng


def unit_rows(mat):
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


class TestRecallAtK:
    def test_identity_features_give_perfect_recall(self):
        feats = unit_rows(derive_rng(0).normal(size=(20, 8)))
        index = RetrievalIndex(features=feats, ids=np.arange(20))
        report = eval_recall_at_k(feats, np.arange(20), index, ks=(1, 5))
        assert report.metrics["R@1"] == 100.0
        assert report.metrics["R@5"] == 100.0

    def test_gold_at_rank_three(self):
        # gallery scores engineered so the gold item lands at rank 3 (0-based 2)
        gallery = np.eye(4, dtype=np.float32)
        index = RetrievalIndex(features=gallery, ids=np.arange(4))
        query = np.array([[0.1, 0.5, 0.9, 0.0]], dtype=np.float32)
        r1 = eval_recall_at_k(query, [1], index, ks=(1,)).metrics["R@1"]
        r5 = eval_recall_at_k(query, [1], index, ks=(5,)).metrics["R@5"]
        assert r1 == 0.0
        assert r5 == 100.0

    def test_matches_brute_force_oracle(self):
        rng = derive_rng(1)
        gallery = unit_rows(rng.normal(size=(100, 16))).astype(np.float32)
        queries = unit_rows(rng.normal(size=(40, 16))).astype(np.float32)
        ids = np.arange(100)
        gold = rng.integers(0, 100, size=40)
        index = RetrievalIndex(features=gallery, ids=ids)
        report = eval_recall_at_k(queries, gold, index, ks=(1, 5, 10))
        # oracle: full argsort with (score desc, id asc)
        scores = queries @ gallery.T
        for k in (1, 5, 10):
            hits = 0
            for i in range(40):
                order = sorted(range(100), key=lambda j: (-scores[i, j], ids[j]))
                if gold[i] in order[:k]:
                    hits += 1
            assert report.metrics[f"R@{k}"] == pytest.approx(100.0 * hits / 40)

    def test_random_features_mean_r1(self):
        rng = derive_rng(2)
        hits = []
        for _ in range(200):
            gallery = unit_rows(rng.normal(size=(100, 12))).astype(np.float32)
            queries = unit_rows(rng.normal(size=(100, 12))).astype(np.float32)
            index = RetrievalIndex(features=gallery, ids=np.arange(100))
            r = eval_recall_at_k(queries, np.arange(100), index, ks=(1,))
            hits.append(r.metrics["R@1"])
        assert abs(float(np.mean(hits)) - 1.0) <= 0.5

    def test_monotone_in_k(self):
        rng = derive_rng(3)
        gallery = unit_rows(rng.normal(size=(50, 8))).astype(np.float32)
        queries = unit_rows(rng.normal(size=(20, 8))).astype(np.float32)
        index = RetrievalIndex(features=gallery, ids=np.arange(50))
        m = eval_recall_at_k(queries, rng.integers(0, 50, size=20), index, ks=(1, 5, 10, 20)).metrics
        assert 0 <= m["R@1"] <= m["R@5"] <= m["R@10"] <= m["R@20"] <= 100

    def test_missing_gold_rejected(self):
        index = RetrievalIndex(features=np.eye(3, dtype=np.float32), ids=np.arange(3))
        with pytest.raises(DataError):
            eval_recall_at_k(np.eye(3, dtype=np.float32), [7], index)

    def test_tie_break_ascending_id(self):
        gallery = np.array([[1.0, 0.0], [1.0, 0.0]], dtype=np.float32)
        query = np.array([[1.0, 0.0]], dtype=np.float32)
        index = RetrievalIndex(features=gallery, ids=np.array([5, 2]))
        # scores tie; id 2 wins rank 0, so gold id 5 sits at rank 1
        assert eval_recall_at_k(query, [5], index, ks=(1,)).metrics["R@1"] == 0.0
        assert eval_recall_at_k(query, [2], index, ks=(1,)).metrics["R@1"] == 100.0


class TestSubsetProtocol:
    def _index(self, n=60, d=8, seed=4, n_sub=3):
        rng = derive_rng(seed)
        feats = unit_rows(rng.normal(size=(n, d))).astype(np.float32)
        subs = [f"sub{i % n_sub}" for i in range(n)]
        return RetrievalIndex(features=feats, ids=np.arange(n), subcategories=subs), rng

    def test_zero_negatives_perfect(self):
        index, rng = self._index()
        queries = unit_rows(rng.normal(size=(10, 8))).astype(np.float32)
        report = eval_protocol_subset(queries, np.arange(10), index, n_negatives=0, seed=0, ks=(1,))
        assert report.metrics["R@1"] == 100.0

    def test_distractors_share_gold_subcategory(self):
        # engineered gallery: every other-subcategory item outranks the gold,
        # every same-subcategory item ranks below it. Full-gallery recall is 0,
        # so subset recall 100 proves the candidate pool is same-subcategory.
        n = 40
        feats = np.zeros((n, 2), dtype=np.float32)
        subs = []
        for i in range(n):
            if i % 2 == 0:
                feats[i] = [1.0, 0.0] if i == 0 else [0.5, 0.0]
                subs.append("target")
            else:
                feats[i] = [2.0, 0.0]
                subs.append("decoy")
        index = RetrievalIndex(features=feats, ids=np.arange(n), subcategories=subs)
        query = np.array([[1.0, 0.0]], dtype=np.float32)
        full = eval_recall_at_k(query, [0], index, ks=(1,))
        subset = eval_protocol_subset(query, [0], index, n_negatives=10, seed=1, ks=(1,))
        assert full.metrics["R@1"] == 0.0
        assert subset.metrics["R@1"] == 100.0

    def test_subset_at_least_full(self):
        index, rng = self._index(n=80)
        queries = unit_rows(rng.normal(size=(30, 8))).astype(np.float32)
        gold = rng.integers(0, 80, size=30)
        full = eval_recall_at_k(queries, gold, index, ks=(1, 5))
        subset = eval_protocol_subset(queries, gold, index, n_negatives=20, seed=2, ks=(1, 5))
        for k in (1, 5):
            assert subset.metrics[f"R@{k}"] >= full.metrics[f"R@{k}"]

    def test_five_seed_averaging_recorded(self):
        index, rng = self._index()
        queries = unit_rows(rng.normal(size=(5, 8))).astype(np.float32)
        report = eval_protocol_subset(queries, np.arange(5), index, n_negatives=10, seed=3)
        assert report.seeds == [3, 4, 5, 6, 7]

    def test_insufficient_distractors_counted(self):
        index, rng = self._index(n=12, n_sub=4)  # 3 per subcategory -> 2 distractors max
        queries = unit_rows(rng.normal(size=(4, 8))).astype(np.float32)
        report = eval_protocol_subset(queries, np.arange(4), index, n_negatives=10, seed=5, ks=(1,))
        assert report.counts["short_candidate_queries"] == 4

    def test_deterministic(self):
        index, rng = self._index()
        queries = unit_rows(rng.normal(size=(8, 8))).astype(np.float32)
        a = eval_protocol_subset(queries, np.arange(8), index, n_negatives=10, seed=9)
        b = eval_protocol_subset(queries, np.arange(8), index, n_negatives=10, seed=9)
        assert a.metrics == b.metrics


class TestClassificationMetrics:
    def test_perfect_predictions(self):
        r = eval_classification([0, 1, 2, 1], [0, 1, 2, 1])
        assert r.metrics["accuracy"] == 100.0
        assert r.metrics["macro_f1"] == 100.0

    def test_binary_half_half_hand_values(self):
        preds = [0, 0, 0, 0]
        labels = [0, 0, 1, 1]
        r = eval_classification(preds, labels)
        assert r.metrics["accuracy"] == 50.0
        assert r.metrics["macro_f1"] == pytest.approx((200 / 3 + 0.0) / 2, abs=1e-6)

    def test_single_correct_example(self):
        r = eval_classification([3], [3])
        assert r.metrics["accuracy"] == 100.0

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            eval_classification([], [])

    def test_matches_library_macro_f1(self):
        from sklearn.metrics import f1_score

        rng = derive_rng(6)
        for _ in range(10):
            preds = rng.integers(0, 6, size=50)
            labels = rng.integers(0, 6, size=50)
            mine = eval_classification(preds, labels).metrics["macro_f1"]
            ref = 100.0 * f1_score(labels, preds, average="macro",
                                   labels=sorted(set(preds.tolist()) | set(labels.tolist())),
                                   zero_division=0)
            assert mine == pytest.approx(ref, abs=1e-6)

    def test_absent_classes_excluded(self):
        r = eval_classification([0, 1], [0, 1])
        assert r.counts["classes"] == 2


class TestExportEmbeddings:
    def test_three_lines_per_pair_and_reproducible(self, tmp_path):
        from fvl.data import DataConfig, generate_catalog, load_split, write_dataset
        from fvl.model import ModelConfig, build_model
        from fvl.text import build_vocab

        cat = generate_catalog(DataConfig(n_products=8, image_size=16), seed=3)
        write_dataset(cat, tmp_path / "d", seed=3, split_ratios=(1.0,),
                      tgir_counts={"train": 0}, outfit_counts={"train": 0})
        split = load_split(tmp_path / "d", "train")
        vocab = build_vocab(split.captions)
        model = build_model(ModelConfig(vocab_size=len(vocab), image_size=16, grid=4, d_model=32,
                                        n_layers=1, n_heads=2, latent_dim=8, max_seq_len=64,
                                        dropout=0.0, base_channels=8), seed=0)
        model.eval()
        p1 = export_embeddings(model, split, vocab, 12, tmp_path / "e1.jsonl")
        p2 = export_embeddings(model, split, vocab, 12, tmp_path / "e2.jsonl")
        lines = p1.read_text().splitlines()
        assert len(lines) == 3 * len(split)
        rec = json.loads(lines[0])
        assert set(rec) == {"id", "modality", "category", "subcategory", "vector"}
        assert len(rec["vector"]) == 8
        modalities = {json.loads(l)["modality"] for l in lines}
        assert modalities == {"image", "text", "joint"}
        assert p1.read_bytes() == p2.read_bytes()
