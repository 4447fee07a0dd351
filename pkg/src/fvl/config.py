"""Run configuration: a flat key/value text format, override handling, and
the architecture hash embedded in checkpoints.

Config files hold one `key = value` pair per line; values are JSON (bare
words are read as strings). `--set key=value` flags use the same syntax.
Unknown keys are rejected so typos cannot silently change a run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .lexicon import DEFAULT_CATEGORIES


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "runs/default"

    # synthetic data
    n_products: int = 2000
    image_size: int = 64
    categories: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_CATEGORIES.items()})
    slot_sizes: dict = field(default_factory=lambda: {"color": 6, "pattern": 4, "sleeve": 4, "material": 4, "style": 4})
    view_count_probs: list = field(default_factory=lambda: [0.25, 0.25, 0.25, 0.25])
    n_style_groups: int = 12
    split_ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    tgir_counts: dict = field(default_factory=lambda: {"train": 1500, "val": 80, "test": 120})
    outfit_counts: dict = field(default_factory=lambda: {"train": 1500, "val": 80, "test": 400})
    items_per_outfit: int = 2

    # text pipeline
    t_max: int = 16
    min_attr_count: int = 5
    pac_count_per_product: bool = False

    # image tokenizer
    vq_codes: int = 64
    vq_code_dim: int = 32
    vq_base_channels: int = 32
    vq_decay: float = 0.99
    vq_beta: float = 0.25
    vq_lr: float = 1e-3
    vq_steps: int = 2000
    vq_batch_size: int = 16

    # model
    grid: int = 8
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    latent_dim: int = 64
    max_seq_len: int = 320
    dropout: float = 0.1
    share_text_fusion: bool = True
    base_channels: int = 32
    tau_init: float = 0.625
    mvc_pool_patches_only: bool = False

    # pre-training
    tasks: list = field(default_factory=lambda: ["itc", "mvc", "pac", "mpfc", "mlm", "itm"])
    task_weights: list | None = None
    iterations: int = 600
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_frac: float = 0.125
    warmup_factor: float = 0.25
    milestone_fracs: list = field(default_factory=lambda: [0.375, 0.75])
    decay_ratio: float = 0.1
    checkpoint_interval: int = 0
    itm_mine_both_sides: bool = False
    mlm_prob: float = 0.15
    view_dropout: float = 0.15
    mask_ratio: float = 0.25
    min_masked_patches: int = 4
    max_masked_patches: int = 8
    mask_aspect: list = field(default_factory=lambda: [1 / 3, 3.0])

    # fine-tuning (matched across tasks and ablation rows)
    ft_iterations: int = 300
    ft_batch_size: int = 16
    ft_lr: float = 5e-4
    ocir_catalog_negatives: int = 0  # 0: in-batch negatives only

    # evaluation
    eval_ks: list = field(default_factory=lambda: [1, 5, 10])
    eval_protocol: str = "full"
    eval_n_negatives: int = 100
    eval_subset_repeats: int = 5

    # ablation matrix
    ablate_rows: list = field(default_factory=lambda: ["none", "itc", "itc+mlm+mpfc+itm+mvc+pac"])
    ablate_seeds: int = 3


# Fields that determine tensor shapes or the meaning of saved weights; the
# checkpoint hash covers exactly these.
ARCH_FIELDS = (
    "seed", "n_products", "image_size", "categories", "slot_sizes", "view_count_probs",
    "n_style_groups", "split_ratios", "t_max", "min_attr_count", "pac_count_per_product",
    "vq_codes", "vq_code_dim", "vq_base_channels", "vq_decay",
    "grid", "d_model", "n_layers", "n_heads", "latent_dim", "max_seq_len",
    "share_text_fusion", "base_channels",
)

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare word -> string


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        out[key.strip()] = _parse_value(raw)
    return out


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    return cfg


def load_config(path=None, sets=(), seed=None, out=None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        apply_overrides(cfg, parse_config_text(Path(path).read_text(encoding="utf-8")))
    pairs = {}
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        pairs[key.strip()] = _parse_value(raw)
    apply_overrides(cfg, pairs)
    if seed is not None:
        cfg.seed = int(seed)
    if out is not None:
        cfg.out_dir = str(out)
    return cfg


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for name in sorted(_FIELDS):
        lines.append(f"{name} = {json.dumps(getattr(cfg, name), sort_keys=True)}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config_to_text(cfg), encoding="utf-8")


def config_hash(cfg: RunConfig) -> str:
    payload = {name: getattr(cfg, name) for name in ARCH_FIELDS}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()
