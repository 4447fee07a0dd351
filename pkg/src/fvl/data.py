"""Deterministic synthetic fashion catalog.

Products carry one attribute word per slot (color, pattern, garment,
sleeve, material, style), a style-compatibility group, and 1..4 views.
Images are flat-shaded 2-D silhouettes: shape family by category,
proportions by garment word, fill by color, overlay by pattern, brightness
by material, accent bar by style. Views are fixed affine transforms of the
base canvas (identity, horizontal flip, +/-15 degree rotation), so "other
angles" are verifiable.

Everything is a pure function of (config, seed): per-product generators are
derived from the root seed with a splittable scheme (see fvl.seeding), so
generation order and parallelism cannot change the output.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError
from .lexicon import ATTRIBUTE_SLOTS, DEFAULT_CATEGORIES, AttributeLexicon, CAPTION_FRAMES, default_lexicon
from .seeding import derive_rng

logger = logging.getLogger(__name__)

MAX_VIEWS = 4
VIEW_TRANSFORMS = ("identity", "hflip", "rot+15", "rot-15")
ROTATION_DEG = 15.0
BACKGROUND = 0.92

_COLOR_RGB = {
    "red": (0.80, 0.12, 0.12),
    "blue": (0.15, 0.25, 0.78),
    "green": (0.12, 0.62, 0.22),
    "black": (0.10, 0.10, 0.10),
    "white": (0.97, 0.97, 0.97),
    "yellow": (0.92, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.65),
    "orange": (0.95, 0.55, 0.10),
}

_MATERIAL_GAIN = {
    "cotton": 1.00,
    "denim": 0.90,
    "wool": 0.96,
    "silk": 1.10,
    "leather": 0.82,
    "linen": 1.05,
}

# Relative y position of the style accent bar inside the silhouette.
_STYLE_ACCENT_Y = {
    "casual": 0.66,
    "formal": 0.34,
    "sporty": 0.50,
    "vintage": 0.60,
    "modern": 0.42,
    "boho": 0.56,
}


@dataclass(frozen=True)
class Product:
    id: int
    category: str
    subcategory: str
    attributes: dict  # slot -> word, one entry per attribute slot
    style_latent: int
    n_views: int
    render_seed: int
    caption: str


@dataclass(frozen=True)
class TgirTriplet:
    reference_id: int
    reference_view: int
    target_id: int
    target_view: int
    changed_slot: str
    modification_text: str


@dataclass(frozen=True)
class Outfit:
    item_product_ids: tuple
    style_latent: int


@dataclass
class DataConfig:
    n_products: int = 2000
    image_size: int = 64
    categories: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_CATEGORIES.items()})
    # Optional cap on the number of active words per non-garment slot;
    # smaller slots make one-attribute-apart product pairs more common.
    slot_sizes: dict = field(default_factory=lambda: {"color": 6, "pattern": 4, "sleeve": 4, "material": 4, "style": 4})
    view_count_probs: tuple = (0.25, 0.25, 0.25, 0.25)
    n_style_groups: int = 12


@dataclass
class ProductCatalog:
    products: list
    config: DataConfig
    lexicon: AttributeLexicon

    def __post_init__(self):
        self._by_id = {p.id: p for p in self.products}

    def __len__(self):
        return len(self.products)

    def product(self, pid: int) -> Product:
        return self._by_id[pid]

    def attribute_vector(self, product: Product) -> tuple:
        return tuple(product.attributes[s] for s in ATTRIBUTE_SLOTS)


def _active_slot_words(lexicon: AttributeLexicon, slot: str, slot_sizes: dict) -> list:
    words = lexicon.slot_words(slot)
    cap = slot_sizes.get(slot)
    if cap is not None:
        if cap < 1:
            raise ConfigError(f"slot size for {slot!r} must be >= 1")
        words = words[: int(cap)]
    return words


def compose_caption(product_attributes: dict, product_id: int, template_seed: int) -> str:
    """Render one of the fixed sentence frames with this product's attribute words."""
    rng = derive_rng(template_seed, "caption", product_id)
    frame = CAPTION_FRAMES[int(rng.integers(len(CAPTION_FRAMES)))]
    return frame.format(**product_attributes)


def generate_catalog(config: DataConfig, seed: int, lexicon: AttributeLexicon | None = None) -> ProductCatalog:
    """Deterministically draw products; subcategories are stratified so every
    one is populated once n_products >= the number of subcategories."""
    if config.n_products < 1:
        raise ConfigError("n_products must be >= 1")
    for cat, subs in config.categories.items():
        if len(subs) < 2:
            raise ConfigError(f"category {cat!r} needs >= 2 subcategories")
    lexicon = lexicon if lexicon is not None else default_lexicon(config.categories)
    probs = np.asarray(config.view_count_probs, dtype=np.float64)
    if probs.ndim != 1 or len(probs) > MAX_VIEWS or abs(probs.sum() - 1.0) > 1e-9 or (probs < 0).any():
        raise ConfigError("view_count_probs must be nonnegative, length <= 4, and sum to 1")

    slot_words = {
        slot: _active_slot_words(lexicon, slot, config.slot_sizes)
        for slot in ATTRIBUTE_SLOTS
        if slot != "garment"
    }

    parent = {sub: cat for cat, subs in config.categories.items() for sub in subs}
    subcats = [sub for subs in config.categories.values() for sub in subs]
    reps = math.ceil(config.n_products / len(subcats))
    pool = np.array(subcats * reps)[: config.n_products]
    order = derive_rng(seed, "subcats").permutation(config.n_products)
    assigned = pool[order]

    products = []
    for pid in range(config.n_products):
        rng = derive_rng(seed, "product", pid)
        sub = str(assigned[pid])
        attrs = {"garment": sub}
        for slot in ATTRIBUTE_SLOTS:
            if slot == "garment":
                continue
            words = slot_words[slot]
            attrs[slot] = words[int(rng.integers(len(words)))]
        n_views = 1 + int(rng.choice(len(probs), p=probs))
        style_latent = int(rng.integers(config.n_style_groups))
        render_seed = int(rng.integers(2**31 - 1))
        caption = compose_caption(attrs, pid, seed)
        products.append(
            Product(
                id=pid,
                category=parent[sub],
                subcategory=sub,
                attributes=attrs,
                style_latent=style_latent,
                n_views=n_views,
                render_seed=render_seed,
                caption=caption,
            )
        )
    return ProductCatalog(products=products, config=config, lexicon=lexicon)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _silhouette(product: Product, size: int) -> np.ndarray:
    """Boolean garment mask on the base (view 0) canvas."""
    jit = derive_rng(product.render_seed, "jitter")
    jx = float(jit.uniform(-0.02, 0.02))
    jy = float(jit.uniform(-0.02, 0.02))
    scale = float(jit.uniform(0.95, 1.05))

    ys, xs = np.mgrid[0:size, 0:size]
    x = (xs + 0.5) / size - 0.5 - jx
    y = (ys + 0.5) / size - 0.5 - jy
    x = x / scale
    y = y / scale

    cat = product.category
    sub = product.subcategory
    sleeve = product.attributes["sleeve"]
    sleeve_len = {"sleeveless": 0.0, "short": 0.10, "long": 0.26, "cropped": 0.18}.get(sleeve, 0.12)

    mask = np.zeros((size, size), dtype=bool)
    if cat == "tops":
        half_w = {"tshirt": 0.16, "blouse": 0.13, "hoodie": 0.19, "sweater": 0.21}.get(sub, 0.16)
        top, bottom = -0.24, 0.22
        mask |= (np.abs(x) < half_w) & (y > top) & (y < bottom)
        if sleeve_len > 0:
            mask |= (np.abs(x) < half_w + sleeve_len) & (y > top) & (y < top + 0.09)
        if sub == "hoodie":
            mask |= (x**2 + (y - top) ** 2) < 0.10**2
    elif cat == "bottoms":
        if sub == "skirt":
            width = 0.10 + 0.34 * (y + 0.26)
            mask |= (np.abs(x) < width / 2 + 0.06) & (y > -0.26) & (y < 0.26)
        else:
            leg_len = {"shorts": 0.08, "jeans": 0.30, "trousers": 0.30}.get(sub, 0.25)
            leg_w = {"shorts": 0.11, "jeans": 0.07, "trousers": 0.10}.get(sub, 0.08)
            mask |= (np.abs(x) < 0.17) & (y > -0.28) & (y < -0.04)
            for side in (-1, 1):
                mask |= (np.abs(x - side * 0.09) < leg_w) & (y >= -0.06) & (y < -0.06 + leg_len)
    else:  # outerwear
        half_w = {"jacket": 0.20, "coat": 0.22, "vest": 0.18, "blazer": 0.20}.get(sub, 0.20)
        bottom = {"jacket": 0.20, "coat": 0.32, "vest": 0.22, "blazer": 0.26}.get(sub, 0.24)
        top = -0.26
        mask |= (np.abs(x) < half_w) & (y > top) & (y < bottom)
        if sub != "vest" and sleeve_len > 0:
            mask |= (np.abs(x) < half_w + sleeve_len) & (y > top) & (y < top + 0.10)
        mask &= ~((np.abs(x) < 0.012) & (y > top + 0.06))  # open front
    return mask


def _pattern_overlay(pattern: str, size: int) -> np.ndarray:
    """Boolean overlay lattice in base-canvas coordinates."""
    ys, xs = np.mgrid[0:size, 0:size]
    cell = max(2, size // 10)
    if pattern == "plain":
        return np.zeros((size, size), dtype=bool)
    if pattern == "striped":
        return (ys // cell) % 2 == 0
    if pattern == "dotted":
        cy = (ys % (2 * cell)) - cell
        cx = (xs % (2 * cell)) - cell
        return (cx**2 + cy**2) < (cell * 0.55) ** 2
    if pattern == "checked":
        return ((ys // cell) + (xs // cell)) % 2 == 0
    if pattern == "floral":
        cy = (ys % (2 * cell)) - cell
        cx = (xs % (2 * cell)) - cell
        return (np.abs(cx) < cell * 0.3) | (np.abs(cy) < cell * 0.3)
    if pattern == "zigzag":
        tri = np.abs((ys % (2 * cell)) - cell)
        return ((xs + tri) // cell) % 2 == 0
    raise DataError(f"unknown pattern word {pattern!r}")


def render_base(product: Product, size: int) -> np.ndarray:
    """View-0 canvas: float32 HxWx3 in [0, 1]."""
    mask = _silhouette(product, size)
    color = np.array(_COLOR_RGB.get(product.attributes["color"], (0.5, 0.5, 0.5)), dtype=np.float32)
    gain = _MATERIAL_GAIN.get(product.attributes["material"], 1.0)

    img = np.full((size, size, 3), BACKGROUND, dtype=np.float32)
    fill = np.clip(color * gain, 0.0, 1.0)
    img[mask] = fill

    overlay = _pattern_overlay(product.attributes["pattern"], size) & mask
    overlay_color = np.clip((1.0 - color) * gain, 0.0, 1.0)
    img[overlay] = 0.5 * img[overlay] + 0.5 * overlay_color

    accent_y = _STYLE_ACCENT_Y.get(product.attributes["style"], 0.5)
    row = int(accent_y * size)
    band = np.zeros((size, size), dtype=bool)
    band[max(row - 1, 0): row + 1, :] = True
    img[band & mask] = 0.18

    return np.clip(img, 0.0, 1.0)


def apply_view_transform(base: np.ndarray, view_index: int) -> np.ndarray:
    """Apply the fixed affine map declared for this view index."""
    if view_index == 0:
        return base.copy()
    if view_index == 1:
        return base[:, ::-1, :].copy()
    angle = ROTATION_DEG if view_index == 2 else -ROTATION_DEG
    out = ndimage.rotate(base, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=BACKGROUND)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_view(product: Product, view_index: int, size: int) -> np.ndarray:
    """Deterministic render of one view; raises IndexError past n_views."""
    if not 0 <= view_index < product.n_views:
        raise IndexError(f"view {view_index} out of range for product with {product.n_views} views")
    return apply_view_transform(render_base(product, size), view_index)


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit so in-memory pixels match the PNG-on-disk path."""
    return (np.round(img * 255.0).astype(np.uint8).astype(np.float32)) / 255.0


def augment_view(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random crop-and-resize or horizontal flip; the stand-in second view
    for single-view products."""
    if rng.integers(2) == 0:
        return img[:, ::-1, :].copy()
    size = img.shape[0]
    crop = int(size * 0.85)
    y0 = int(rng.integers(size - crop + 1))
    x0 = int(rng.integers(size - crop + 1))
    patch = img[y0: y0 + crop, x0: x0 + crop, :]
    zoom = size / crop
    out = ndimage.zoom(patch, (zoom, zoom, 1.0), order=1)
    out = out[:size, :size, :]
    if out.shape[0] < size or out.shape[1] < size:
        out = np.pad(out, ((0, size - out.shape[0]), (0, size - out.shape[1]), (0, 0)), mode="edge")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Derived task data
# ---------------------------------------------------------------------------

def split_dataset(catalog: ProductCatalog, ratios, seed: int) -> dict:
    """Product-level split; all views of a product stay together."""
    ratios = list(ratios)
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    names = ["train", "val", "test"][: len(ratios)]
    n = len(catalog.products)
    counts = [int(math.floor(r * n)) for r in ratios]
    remainders = [r * n - c for r, c in zip(ratios, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    ids = derive_rng(seed, "split").permutation(n)
    out, start = {}, 0
    for name, c in zip(names, counts):
        out[name] = sorted(int(i) for i in ids[start: start + c])
        start += c
    return out


def build_tgir_triplets(catalog: ProductCatalog, n: int, seed: int, product_ids=None) -> list:
    """All ordered product pairs at attribute Hamming distance exactly 1,
    subsampled to n; modification text names the old and new value."""
    products = catalog.products if product_ids is None else [catalog.product(i) for i in product_ids]
    if len(products) < 2:
        logger.warning("tgir: need >= 2 products, returning 0 of %d requested", n)
        return []

    eligible = []
    for si, slot in enumerate(ATTRIBUTE_SLOTS):
        groups = {}
        for p in products:
            vec = catalog.attribute_vector(p)
            key = vec[:si] + vec[si + 1:]
            groups.setdefault(key, []).append(p)
        for members in groups.values():
            for a in members:
                for b in members:
                    if a.id != b.id and a.attributes[slot] != b.attributes[slot]:
                        eligible.append((a, b, slot))
    eligible.sort(key=lambda t: (t[0].id, t[1].id, t[2]))

    rng = derive_rng(seed, "tgir")
    if len(eligible) > n:
        idx = rng.choice(len(eligible), size=n, replace=False)
        chosen = [eligible[int(i)] for i in sorted(idx)]
    else:
        chosen = eligible
        if len(eligible) < n:
            logger.warning("tgir: only %d eligible pairs for %d requested", len(eligible), n)

    triplets = []
    for a, b, slot in chosen:
        ref_view = int(rng.integers(a.n_views))
        tgt_view = int(rng.integers(b.n_views))
        text = f"replace {a.attributes[slot]} with {b.attributes[slot]}"
        triplets.append(
            TgirTriplet(
                reference_id=a.id,
                reference_view=ref_view,
                target_id=b.id,
                target_view=tgt_view,
                changed_slot=slot,
                modification_text=text,
            )
        )
    return triplets


def _outfit_combos_for_group(by_cat: dict, items_per_outfit: int):
    from itertools import combinations, product as iproduct

    cats = sorted(by_cat)
    for cat_subset in combinations(cats, items_per_outfit):
        for items in iproduct(*(by_cat[c] for c in cat_subset)):
            yield tuple(p.id for p in items)


def build_outfits(catalog: ProductCatalog, items_per_outfit: int, n: int, seed: int, product_ids=None) -> list:
    """Outfits are item sets sharing a style group with pairwise-distinct
    categories. Enumerates exhaustively when the combination space is small,
    otherwise samples unique combinations."""
    if items_per_outfit < 2:
        raise ConfigError("items_per_outfit must be >= 2")
    products = catalog.products if product_ids is None else [catalog.product(i) for i in product_ids]
    if items_per_outfit > len(catalog.config.categories):
        logger.warning("outfits: %d items requested but only %d categories exist", items_per_outfit, len(catalog.config.categories))
        return []

    groups = {}
    for p in products:
        groups.setdefault(p.style_latent, {}).setdefault(p.category, []).append(p)

    counts = {}
    for style, by_cat in sorted(groups.items()):
        total = 0
        from itertools import combinations

        cats = sorted(by_cat)
        if len(cats) >= items_per_outfit:
            for subset in combinations(cats, items_per_outfit):
                prod = 1
                for c in subset:
                    prod *= len(by_cat[c])
                total += prod
        counts[style] = total
    grand_total = sum(counts.values())

    rng = derive_rng(seed, "outfits")
    outfits = []
    if grand_total <= max(4 * n, 4096):
        for style, by_cat in sorted(groups.items()):
            if counts[style] == 0:
                continue
            for ids in _outfit_combos_for_group(by_cat, items_per_outfit):
                outfits.append(Outfit(item_product_ids=ids, style_latent=style))
        if len(outfits) > n:
            idx = rng.choice(len(outfits), size=n, replace=False)
            outfits = [outfits[int(i)] for i in sorted(idx)]
    else:
        styles = sorted(s for s, c in counts.items() if c > 0)
        weights = np.array([counts[s] for s in styles], dtype=np.float64)
        weights /= weights.sum()
        seen = set()
        attempts = 0
        while len(outfits) < n and attempts < 80 * n:
            attempts += 1
            style = styles[int(rng.choice(len(styles), p=weights))]
            by_cat = groups[style]
            cats = sorted(c for c in by_cat if by_cat[c])
            if len(cats) < items_per_outfit:
                continue
            chosen_cats = rng.choice(len(cats), size=items_per_outfit, replace=False)
            ids = tuple(
                by_cat[cats[int(ci)]][int(rng.integers(len(by_cat[cats[int(ci)]])))].id
                for ci in sorted(chosen_cats)
            )
            if (style, ids) in seen:
                continue
            seen.add((style, ids))
            outfits.append(Outfit(item_product_ids=ids, style_latent=style))

    if len(outfits) < n:
        logger.warning("outfits: built %d of %d requested", len(outfits), n)
    return outfits


# ---------------------------------------------------------------------------
# On-disk dataset
# ---------------------------------------------------------------------------

def write_dataset(
    catalog: ProductCatalog,
    out_dir,
    seed: int,
    split_ratios=(0.8, 0.1, 0.1),
    tgir_counts=None,
    outfit_counts=None,
    items_per_outfit: int = 2,
) -> dict:
    """Write one directory per split: PNG views, a JSONL manifest, plus JSONL
    triplet/outfit files. Byte-identical across repeated calls."""
    out_dir = Path(out_dir)
    tgir_counts = tgir_counts or {"train": 1200, "val": 60, "test": 100}
    outfit_counts = outfit_counts or {"train": 1200, "val": 60, "test": 300}
    splits = split_dataset(catalog, split_ratios, seed)
    size = catalog.config.image_size

    summary = {"splits": {}}
    for split, pids in splits.items():
        split_dir = out_dir / split
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        manifest_lines = []
        for pid in pids:
            p = catalog.product(pid)
            for v in range(p.n_views):
                img = render_view(p, v, size)
                rel = f"{split}/images/{pid:06d}_v{v}.png"
                arr = np.round(img * 255.0).astype(np.uint8)
                Image.fromarray(arr).save(out_dir / rel, format="PNG")
                manifest_lines.append(
                    {
                        "product_id": pid,
                        "view_index": v,
                        "image_path": rel,
                        "caption": p.caption,
                        "category": p.category,
                        "subcategory": p.subcategory,
                        "attributes": p.attributes,
                        "style_latent": p.style_latent,
                    }
                )
        _write_jsonl(split_dir / "manifest.jsonl", manifest_lines)

        triplets = build_tgir_triplets(catalog, tgir_counts.get(split, 0), seed + 1, product_ids=pids)
        _write_jsonl(
            split_dir / "triplets.jsonl",
            [
                {
                    "reference_id": t.reference_id,
                    "reference_view": t.reference_view,
                    "target_id": t.target_id,
                    "target_view": t.target_view,
                    "changed_slot": t.changed_slot,
                    "modification_text": t.modification_text,
                }
                for t in triplets
            ],
        )
        outfits = build_outfits(catalog, items_per_outfit, outfit_counts.get(split, 0), seed + 2, product_ids=pids)
        _write_jsonl(
            split_dir / "outfits.jsonl",
            [{"item_product_ids": list(o.item_product_ids), "style_latent": o.style_latent} for o in outfits],
        )
        summary["splits"][split] = {
            "products": len(pids),
            "samples": len(manifest_lines),
            "triplets": len(triplets),
            "outfits": len(outfits),
        }
    return summary


def _write_jsonl(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


@dataclass
class SplitData:
    """One split loaded into memory: parallel per-sample arrays plus
    product-level lookups."""

    records: list
    images: np.ndarray  # (n_samples, H, W, 3) float32
    product_ids: np.ndarray
    view_indices: np.ndarray
    captions: list
    categories: list
    subcategories: list
    style_latents: np.ndarray
    triplets: list
    outfits: list

    def __post_init__(self):
        self.sample_index = {(int(p), int(v)): i for i, (p, v) in enumerate(zip(self.product_ids, self.view_indices))}
        self.views_of = {}
        for i, pid in enumerate(self.product_ids):
            self.views_of.setdefault(int(pid), []).append(i)

    def __len__(self):
        return len(self.records)

    def primary_sample(self, pid: int) -> int:
        return self.views_of[pid][0]

    @property
    def unique_product_ids(self):
        return sorted(self.views_of)


def load_split(root, split: str) -> SplitData:
    root = Path(root)
    records = read_jsonl(root / split / "manifest.jsonl")
    if not records:
        raise DataError(f"empty manifest for split {split!r}")
    images = []
    for r in records:
        arr = np.asarray(Image.open(root / r["image_path"]).convert("RGB"), dtype=np.float32) / 255.0
        images.append(arr)
    trip_path = root / split / "triplets.jsonl"
    outfit_path = root / split / "outfits.jsonl"
    triplets = [
        TgirTriplet(
            reference_id=d["reference_id"],
            reference_view=d["reference_view"],
            target_id=d["target_id"],
            target_view=d["target_view"],
            changed_slot=d["changed_slot"],
            modification_text=d["modification_text"],
        )
        for d in (read_jsonl(trip_path) if trip_path.exists() else [])
    ]
    outfits = [
        Outfit(item_product_ids=tuple(d["item_product_ids"]), style_latent=d["style_latent"])
        for d in (read_jsonl(outfit_path) if outfit_path.exists() else [])
    ]
    return SplitData(
        records=records,
        images=np.stack(images).astype(np.float32),
        product_ids=np.array([r["product_id"] for r in records], dtype=np.int64),
        view_indices=np.array([r["view_index"] for r in records], dtype=np.int64),
        captions=[r["caption"] for r in records],
        categories=[r["category"] for r in records],
        subcategories=[r["subcategory"] for r in records],
        style_latents=np.array([r["style_latent"] for r in records], dtype=np.int64),
        triplets=triplets,
        outfits=outfits,
    )
