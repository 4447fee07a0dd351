"""Experiment orchestration over a run directory.

A run directory is self-describing: the resolved config, the generated
dataset, tokenizer artifacts, pre-training/fine-tuning checkpoints with
metrics logs, and evaluation reports all live under one root, and every
artifact is a pure function of (config, seed).
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import finetune as ft
from .config import RunConfig, config_hash, save_config
from .data import DataConfig, generate_catalog, load_split, write_dataset
from .errors import ConfigError, DataError, StateError
from .evaluate import export_embeddings
from .lexicon import default_lexicon
from .model import ModelConfig, VLModel, build_model
from .pretrain import (
    BatchBuilder,
    BatchBuilderConfig,
    LoopConfig,
    TaskSchedule,
    make_optimizer,
    restore_optimizer,
    run_pretraining,
)
from .seeding import derive_torch_seed
from .text import PseudoAttributeSet, Vocabulary, build_vocab, mine_pseudo_attributes
from .vq import VqConfig, load_tokenizer, read_code_cache, save_tokenizer, tokenize_split, train_tokenizer, write_code_cache

logger = logging.getLogger(__name__)

DOWNSTREAM_TASKS = ("retrieval", "tgir", "scr", "ocir")
ABLATION_COLUMNS = ("itr", "tir", "tgir", "scr", "ocir")


def subseed(root_seed: int, *keys) -> int:
    return derive_torch_seed(root_seed, *keys) % (2**31 - 1)


class Workspace:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        self.dataset_dir = self.root / "dataset"
        self.tokenizer_dir = self.root / "tokenizer"
        self._splits = {}
        self._vocab = None
        self._attrs = None
        self._codes = {}
        self.lexicon = default_lexicon(cfg.categories)

    # -- artifacts -----------------------------------------------------------

    def write_resolved_config(self) -> None:
        save_config(self.cfg, self.root / "config.cfg")

    def data_config(self) -> DataConfig:
        c = self.cfg
        return DataConfig(
            n_products=c.n_products,
            image_size=c.image_size,
            categories=c.categories,
            slot_sizes=c.slot_sizes,
            view_count_probs=tuple(c.view_count_probs),
            n_style_groups=c.n_style_groups,
        )

    def generate_data(self) -> dict:
        c = self.cfg
        catalog = generate_catalog(self.data_config(), c.seed, lexicon=self.lexicon)
        summary = write_dataset(
            catalog,
            self.dataset_dir,
            seed=c.seed,
            split_ratios=tuple(c.split_ratios),
            tgir_counts=c.tgir_counts,
            outfit_counts=c.outfit_counts,
            items_per_outfit=c.items_per_outfit,
        )
        train = load_split(self.dataset_dir, "train")
        vocab = build_vocab(train.captions)
        vocab.save(self.dataset_dir / "vocab.json")
        if c.pac_count_per_product:
            seen, corpus = set(), []
            for pid, cap in zip(train.product_ids, train.captions):
                if int(pid) not in seen:
                    seen.add(int(pid))
                    corpus.append(cap)
        else:
            corpus = train.captions
        attrs = mine_pseudo_attributes(corpus, self.lexicon, c.min_attr_count)
        attrs.save(self.dataset_dir / "attributes.json")
        summary["vocab_size"] = len(vocab)
        summary["n_attributes"] = len(attrs)
        with open(self.dataset_dir / "summary.json", "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        self._splits.clear()
        self._vocab, self._attrs = vocab, attrs
        return summary

    def require_dataset(self) -> None:
        if not (self.dataset_dir / "train" / "manifest.jsonl").exists():
            raise DataError(f"missing dataset under {self.dataset_dir}; run gen-data first")

    def split(self, name: str):
        if name not in self._splits:
            self.require_dataset()
            self._splits[name] = load_split(self.dataset_dir, name)
        return self._splits[name]

    @property
    def vocab(self) -> Vocabulary:
        if self._vocab is None:
            path = self.dataset_dir / "vocab.json"
            if not path.exists():
                raise DataError(f"missing vocabulary at {path}; run gen-data first")
            self._vocab = Vocabulary.load(path)
        return self._vocab

    @property
    def attributes(self) -> PseudoAttributeSet:
        if self._attrs is None:
            path = self.dataset_dir / "attributes.json"
            if not path.exists():
                raise DataError(f"missing attribute set at {path}; run gen-data first")
            self._attrs = PseudoAttributeSet.load(path)
        return self._attrs

    # -- tokenizer -----------------------------------------------------------

    def vq_config(self) -> VqConfig:
        c = self.cfg
        return VqConfig(
            image_size=c.image_size,
            grid=c.grid,
            n_codes=c.vq_codes,
            code_dim=c.vq_code_dim,
            base_channels=c.vq_base_channels,
            decay=c.vq_decay,
            beta=c.vq_beta,
            lr=c.vq_lr,
            batch_size=c.vq_batch_size,
            steps=c.vq_steps,
        )

    def tokenizer_path(self) -> Path:
        return self.tokenizer_dir / "vq.ckpt"

    def train_image_tokenizer(self) -> dict:
        self.require_dataset()
        train = self.split("train")
        model, history = train_tokenizer(train.images, self.vq_config(), seed=subseed(self.cfg.seed, "vq"))
        model.freeze()
        save_tokenizer(model, self.tokenizer_path(), config_hash=config_hash(self.cfg))
        self.tokenizer_dir.mkdir(parents=True, exist_ok=True)
        with open(self.tokenizer_dir / "history.json", "w", encoding="utf-8") as f:
            json.dump(history, f, indent=2)
        for name in ("train", "val", "test"):
            if not (self.dataset_dir / name / "manifest.jsonl").exists():
                continue
            split = self.split(name)
            grids = tokenize_split(model, split.images)
            write_code_cache(self.tokenizer_dir / f"codes_{name}.jsonl",
                             [r["image_path"] for r in split.records], grids)
        self._codes.clear()
        return {"steps": len(history), "final": history[-1] if history else None}

    def codes_for(self, name: str) -> np.ndarray:
        if name not in self._codes:
            path = self.tokenizer_dir / f"codes_{name}.jsonl"
            if not path.exists():
                raise DataError(f"missing code cache at {path}; run train-tokenizer first")
            cache = read_code_cache(path)
            split = self.split(name)
            self._codes[name] = np.stack([cache[r["image_path"]] for r in split.records])
        return self._codes[name]

    # -- models --------------------------------------------------------------

    def model_config(self) -> ModelConfig:
        c = self.cfg
        return ModelConfig(
            vocab_size=len(self.vocab),
            image_size=c.image_size,
            grid=c.grid,
            d_model=c.d_model,
            n_layers=c.n_layers,
            n_heads=c.n_heads,
            latent_dim=c.latent_dim,
            n_codes=c.vq_codes,
            n_attributes=len(self.attributes),
            max_seq_len=c.max_seq_len,
            dropout=c.dropout,
            share_text_fusion=c.share_text_fusion,
            base_channels=c.base_channels,
            tau_init=c.tau_init,
            mvc_pool_patches_only=c.mvc_pool_patches_only,
        )

    def new_model(self, seed: int) -> VLModel:
        return build_model(self.model_config(), seed=seed)

    def load_model_tensors(self, path, force: bool = False):
        tensors, header = ckpt_io.load_checkpoint(path, expected_config_hash=config_hash(self.cfg), force=force)
        return tensors, header

    def model_from_checkpoint(self, path, seed: int = 0, force: bool = False):
        tensors, header = self.load_model_tensors(path, force=force)
        model = self.new_model(seed)
        state = {k[len("model."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model.")}
        missing = [k for k in model.state_dict() if k not in state]
        if missing:
            raise StateError(f"checkpoint {path} lacks model tensors: {missing[:3]}...")
        model.load_state_dict({k: v.reshape(model.state_dict()[k].shape) for k, v in state.items()})
        return model, tensors, header

    def loop_config(self, iterations=None, tasks_override=None) -> LoopConfig:
        c = self.cfg
        return LoopConfig(
            iterations=c.iterations if iterations is None else iterations,
            batch_size=c.batch_size,
            lr=c.lr,
            weight_decay=c.weight_decay,
            warmup_frac=c.warmup_frac,
            warmup_factor=c.warmup_factor,
            milestone_fracs=tuple(c.milestone_fracs),
            decay_ratio=c.decay_ratio,
            checkpoint_interval=c.checkpoint_interval,
            itm_mine_both_sides=c.itm_mine_both_sides,
        )

    def ft_loop_config(self) -> LoopConfig:
        c = self.cfg
        return LoopConfig(
            iterations=c.ft_iterations,
            batch_size=c.ft_batch_size,
            lr=c.ft_lr,
            weight_decay=c.weight_decay,
            warmup_frac=c.warmup_frac,
            warmup_factor=c.warmup_factor,
            milestone_fracs=tuple(c.milestone_fracs),
            decay_ratio=c.decay_ratio,
        )

    def batch_builder(self, split_name: str = "train") -> BatchBuilder:
        c = self.cfg
        return BatchBuilder(
            self.split(split_name),
            self.vocab,
            self.attributes,
            self.codes_for(split_name),
            grid=c.grid,
            config=BatchBuilderConfig(
                t_max=c.t_max,
                mlm_prob=c.mlm_prob,
                view_dropout=c.view_dropout,
                mask_ratio=c.mask_ratio,
                min_masked_patches=c.min_masked_patches,
                max_masked_patches=c.max_masked_patches,
                mask_aspect=tuple(c.mask_aspect),
            ),
            lexicon=self.lexicon,
        )

    # -- stages --------------------------------------------------------------

    def pretrain(self, out_dir=None, seed=None, tasks=None, resume=None) -> Path:
        c = self.cfg
        out_dir = Path(out_dir) if out_dir else self.root / "pretrain"
        seed = c.seed if seed is None else seed
        tasks = tasks if tasks is not None else c.tasks
        schedule = TaskSchedule(tasks=tuple(tasks),
                                weights=tuple(c.task_weights) if c.task_weights else None)
        builder = self.batch_builder("train")
        loop_cfg = self.loop_config()
        start = 0
        optimizer = None
        if resume:
            model, tensors, header = self.model_from_checkpoint(resume, seed=subseed(seed, "pt-model"))
            optimizer = make_optimizer(model, loop_cfg)
            restore_optimizer(model, optimizer, tensors)
            start = int(header["extras"].get("iteration", 0))
            logger.info("resuming pre-training at iteration %d from %s", start, resume)
        else:
            model = self.new_model(subseed(seed, "pt-model"))
        return run_pretraining(
            model, builder, schedule, loop_cfg, seed=subseed(seed, "pt-loop"), out_dir=out_dir,
            config_hash=config_hash(self.cfg), start_iteration=start, optimizer=optimizer,
        )

    def _init_model(self, init_ckpt, seed: int) -> VLModel:
        if init_ckpt:
            model, _, _ = self.model_from_checkpoint(init_ckpt, seed=seed)
            return model
        return self.new_model(seed)

    def finetune(self, task: str, init_ckpt=None, out_dir=None, seed=None) -> Path:
        c = self.cfg
        seed = c.seed if seed is None else seed
        out_dir = Path(out_dir) if out_dir else self.root / f"finetune_{task}"
        out_dir.mkdir(parents=True, exist_ok=True)
        train = self.split("train")
        loop_cfg = self.ft_loop_config()
        metrics_path = out_dir / "metrics.jsonl"
        model = self._init_model(init_ckpt, subseed(seed, "ft-model", task))
        extras = {"kind": "finetune", "task": task}
        head_tensors = {}

        if task == "retrieval":
            ft.finetune_retrieval(model, train, self.vocab, c.t_max, loop_cfg,
                                  seed=subseed(seed, "ft", task), metrics_path=metrics_path)
        elif task == "tgir":
            ft.finetune_tgir(model, train, self.vocab, c.t_max, loop_cfg,
                             seed=subseed(seed, "ft", task), metrics_path=metrics_path)
        elif task in ("cr", "scr", "mscr"):
            level = "category" if task == "cr" else "subcategory"
            labels = self.class_labels(level)
            model, head = ft.finetune_classification(
                model, train, self.vocab, c.t_max, labels, level, multi_image=(task == "mscr"),
                loop_cfg=loop_cfg, seed=subseed(seed, "ft", task), metrics_path=metrics_path,
            )
            head_tensors = {f"head.{k}": v for k, v in head.state_dict().items()}
            extras.update({"level": level, "multi_image": task == "mscr", "labels": labels})
        elif task == "ocir":
            categories = sorted(c.categories)
            model, head = ft.finetune_ocir(model, train, categories, loop_cfg,
                                           seed=subseed(seed, "ft", task), metrics_path=metrics_path,
                                           catalog_negatives=c.ocir_catalog_negatives)
            head_tensors = {f"head.{k}": v for k, v in head.state_dict().items()}
            extras.update({"categories": categories})
        else:
            raise ConfigError(f"unknown fine-tuning task {task!r}")

        tensors = {f"model.{k}": v for k, v in model.state_tensors().items()}
        tensors.update(head_tensors)
        path = out_dir / "ckpt_final.fvl"
        ckpt_io.save_checkpoint(path, tensors, config_hash=config_hash(self.cfg), extras=extras)
        return path

    def class_labels(self, level: str) -> list:
        if level == "category":
            return sorted(self.cfg.categories)
        return sorted(s for subs in self.cfg.categories.values() for s in subs)

    def evaluate(self, task: str, ckpt_path, split_name: str = "test", force: bool = False) -> dict:
        c = self.cfg
        split = self.split(split_name)
        model, tensors, header = self.model_from_checkpoint(ckpt_path, seed=0, force=force)
        model.eval()
        ks = tuple(c.eval_ks)
        if task == "retrieval":
            reports = ft.evaluate_retrieval(
                model, split, self.vocab, c.t_max, ks=ks, protocol=c.eval_protocol,
                n_negatives=c.eval_n_negatives, seed=subseed(c.seed, "eval", split_name),
                n_repeats=c.eval_subset_repeats,
            )
            result = {name: rep.to_dict() for name, rep in reports.items()}
        elif task == "tgir":
            result = {"tgir": ft.evaluate_tgir(model, split, self.vocab, c.t_max, ks=ks).to_dict()}
        elif task in ("cr", "scr", "mscr"):
            extras = header["extras"]
            if extras.get("task") != task:
                raise StateError(f"checkpoint at {ckpt_path} was fine-tuned for {extras.get('task')!r}, not {task!r}")
            labels = extras["labels"]
            head = ft.ClassificationHead(c.d_model, len(labels))
            head.load_state_dict({k[len("head."):]: torch.from_numpy(v).reshape(head.state_dict()[k[len("head."):]].shape)
                                  for k, v in tensors.items() if k.startswith("head.")})
            rep = ft.evaluate_classification_task(model, head, split, self.vocab, c.t_max,
                                                  labels, extras["level"], extras["multi_image"])
            result = {task: rep.to_dict()}
        elif task == "ocir":
            extras = header["extras"]
            categories = extras.get("categories", sorted(c.categories))
            head = ft.OcirHead(len(categories), c.d_model, c.latent_dim)
            head.load_state_dict({k[len("head."):]: torch.from_numpy(v).reshape(head.state_dict()[k[len("head."):]].shape)
                                  for k, v in tensors.items() if k.startswith("head.")})
            result = {"ocir": ft.evaluate_ocir(model, head, split, categories, ks=ks).to_dict()}
        else:
            raise ConfigError(f"unknown evaluation task {task!r}")
        out = self.root / f"eval_{task}_{split_name}.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as f:
            json.dump(result, f, indent=2, sort_keys=True)
        return result

    def export(self, ckpt_path, split_name: str, out_file=None, force: bool = False) -> Path:
        model, _, _ = self.model_from_checkpoint(ckpt_path, seed=0, force=force)
        model.eval()
        out_file = Path(out_file) if out_file else self.root / f"embeddings_{split_name}.jsonl"
        return export_embeddings(model, self.split(split_name), self.vocab, self.cfg.t_max, out_file)

    # -- ablation matrix -----------------------------------------------------

    def ensure_artifacts(self) -> None:
        if not (self.dataset_dir / "train" / "manifest.jsonl").exists():
            logger.info("ablate: generating dataset")
            self.generate_data()
        if not self.tokenizer_path().exists():
            logger.info("ablate: training image tokenizer")
            self.train_image_tokenizer()

    def ablate(self) -> dict:
        c = self.cfg
        self.ensure_artifacts()
        rows = [parse_row(r) for r in c.ablate_rows]
        out_root = self.root / "ablate"
        report = {"rows": [], "columns": list(ABLATION_COLUMNS)}
        for row_name, tasks in rows:
            row_entry = {"name": row_name, "tasks": tasks, "seeds": []}
            for rep in range(c.ablate_seeds):
                run_dir = out_root / row_name / f"seed{rep}"
                pt_seed = subseed(c.seed, "ablate-pt", rep)
                if tasks:
                    ckpt = self.pretrain(out_dir=run_dir / "pretrain", seed=pt_seed, tasks=tasks)
                else:
                    model = self.new_model(subseed(pt_seed, "pt-model"))
                    tensors = {f"model.{k}": v for k, v in model.state_tensors().items()}
                    ckpt = run_dir / "pretrain" / "ckpt_final.fvl"
                    ckpt_io.save_checkpoint(ckpt, tensors, config_hash=config_hash(c),
                                            extras={"iteration": 0, "kind": "pretrain"})
                seed_entry = {"seed": rep, "metrics": {}}
                for task in DOWNSTREAM_TASKS:
                    ft_seed = subseed(c.seed, "ablate-ft", rep, task)
                    ft_ckpt = self.finetune(task, init_ckpt=ckpt, out_dir=run_dir / f"finetune_{task}",
                                            seed=ft_seed)
                    result = self.evaluate(task, ft_ckpt, split_name="test")
                    for col, metrics in _columns_from_result(task, result).items():
                        seed_entry["metrics"][col] = metrics
                seed_entry["meta_sum"] = float(sum(seed_entry["metrics"][col] for col in ABLATION_COLUMNS))
                row_entry["seeds"].append(seed_entry)
            row_entry["median"] = {
                col: float(np.median([s["metrics"][col] for s in row_entry["seeds"]]))
                for col in ABLATION_COLUMNS
            }
            row_entry["median_meta_sum"] = float(np.median([s["meta_sum"] for s in row_entry["seeds"]]))
            report["rows"].append(row_entry)
            logger.info("ablate row %s: median meta-sum %.2f", row_name, row_entry["median_meta_sum"])
        out_root.mkdir(parents=True, exist_ok=True)
        with open(out_root / "report.json", "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        (out_root / "table.txt").write_text(render_table(report), encoding="utf-8")
        return report


def parse_row(row: str):
    name = row.strip().lower()
    if name in ("none", ""):
        return "none", []
    tasks = [t.strip() for t in name.replace(",", "+").split("+") if t.strip()]
    return "+".join(tasks), tasks


def _mean_recalls(metrics: dict) -> float:
    vals = [v for k, v in metrics.items() if k.startswith("R@")]
    return float(np.mean(vals))


def _columns_from_result(task: str, result: dict) -> dict:
    if task == "retrieval":
        return {
            "itr": _mean_recalls(result["itr"]["metrics"]),
            "tir": _mean_recalls(result["tir"]["metrics"]),
        }
    if task == "tgir":
        return {"tgir": _mean_recalls(result["tgir"]["metrics"])}
    if task == "scr":
        m = result["scr"]["metrics"]
        return {"scr": float((m["accuracy"] + m["macro_f1"]) / 2)}
    if task == "ocir":
        return {"ocir": _mean_recalls(result["ocir"]["metrics"])}
    raise ConfigError(f"unknown downstream task {task!r}")


def render_table(report: dict) -> str:
    cols = report["columns"]
    header = ["row".ljust(28)] + [c.upper().rjust(8) for c in cols] + ["META-SUM".rjust(10)]
    lines = ["".join(header)]
    for row in report["rows"]:
        cells = [row["name"].ljust(28)]
        cells += [f"{row['median'][c]:8.2f}" for c in cols]
        cells += [f"{row['median_meta_sum']:10.2f}"]
        lines.append("".join(cells))
    return "\n".join(lines) + "\n"
