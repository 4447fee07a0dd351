"""Discrete image tokenizer: a small VQ autoencoder with an EMA codebook,
plus the block-wise mask generator used by masked-patch training.

Training minimizes pixel MSE + a commitment term; gradients pass the
quantizer through the straight-through estimator while the codebook itself
is maintained by exponential-moving-average cluster statistics.
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
from torch import nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import NumericError, ShapeError, StateError, TrainingError
from .seeding import derive_rng, seed_torch

logger = logging.getLogger(__name__)


def nearest_code(latents: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codeword per row; exact distance ties go to the
    lowest index (argmin returns the first minimum)."""
    d = (
        latents.pow(2).sum(1, keepdim=True)
        - 2.0 * latents @ codebook.t()
        + codebook.pow(2).sum(1)
    )
    return d.argmin(dim=1)


def ema_update(
    codebook: torch.Tensor,
    ema_counts: torch.Tensor,
    ema_sums: torch.Tensor,
    latents: torch.Tensor,
    assignments: torch.Tensor,
    decay: float,
    epsilon: float = 1e-5,
):
    """One EMA step over cluster statistics.

    counts_j <- decay*counts_j + (1-decay)*batch_count_j
    sums_j   <- decay*sums_j   + (1-decay)*batch_sum_j
    code_j   <- sums_j / max(counts_j, epsilon)

    The epsilon floor keeps never-assigned codes finite; assigned codes are
    an exact ratio of their running statistics.
    """
    n_codes = codebook.shape[0]
    one_hot = F.one_hot(assignments, n_codes).to(latents.dtype)
    batch_counts = one_hot.sum(0)
    batch_sums = one_hot.t() @ latents
    new_counts = decay * ema_counts + (1.0 - decay) * batch_counts
    new_sums = decay * ema_sums + (1.0 - decay) * batch_sums
    new_codebook = new_sums / new_counts.clamp(min=epsilon).unsqueeze(1)
    return new_codebook, new_counts, new_sums


class VectorQuantizerEma(nn.Module):
    """EMA-maintained codebook; quantization is gradient-free."""

    def __init__(self, n_codes: int, dim: int, decay: float = 0.99, epsilon: float = 1e-5):
        super().__init__()
        self.n_codes = n_codes
        self.dim = dim
        self.decay = decay
        self.epsilon = epsilon
        self.register_buffer("codebook", torch.randn(n_codes, dim) * 0.1)
        self.register_buffer("ema_counts", torch.ones(n_codes))
        self.register_buffer("ema_sums", self.codebook.clone())

    def assign(self, latents: torch.Tensor) -> torch.Tensor:
        return nearest_code(latents, self.codebook)

    def quantize(self, latents: torch.Tensor):
        idx = self.assign(latents)
        return self.codebook[idx], idx

    def update(self, latents: torch.Tensor, assignments: torch.Tensor) -> None:
        cb, counts, sums = ema_update(
            self.codebook, self.ema_counts, self.ema_sums, latents.detach(), assignments, self.decay, self.epsilon
        )
        self.codebook.copy_(cb)
        self.ema_counts.copy_(counts)
        self.ema_sums.copy_(sums)

    def kmeans_init(self, latents: torch.Tensor, rng: np.random.Generator, iters: int = 10) -> None:
        """Seed the codebook with k-means centroids of warmup encoder outputs."""
        n = latents.shape[0]
        k = min(self.n_codes, n)
        centers = latents[rng.choice(n, size=k, replace=False)].clone()
        for _ in range(iters):
            idx = nearest_code(latents, centers)
            for j in range(k):
                sel = latents[idx == j]
                if len(sel):
                    centers[j] = sel.mean(0)
        self.codebook[:k] = centers
        self.ema_sums.copy_(self.codebook.clone())
        self.ema_counts.fill_(1.0)


class _Encoder(nn.Module):
    def __init__(self, base_channels: int, n_down: int, code_dim: int):
        super().__init__()
        layers = [nn.Conv2d(3, base_channels, 3, padding=1), nn.GELU()]
        ch = base_channels
        for _ in range(n_down):
            layers += [nn.Conv2d(ch, min(2 * ch, 128), 3, stride=2, padding=1), nn.GroupNorm(8, min(2 * ch, 128)), nn.GELU()]
            ch = min(2 * ch, 128)
        layers += [nn.Conv2d(ch, code_dim, 1)]
        self.net = nn.Sequential(*layers)
        self.out_channels = ch

    def forward(self, x):
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, base_channels: int, n_down: int, code_dim: int):
        super().__init__()
        ch = min(base_channels * (2**n_down), 128)
        layers = [nn.Conv2d(code_dim, ch, 3, padding=1), nn.GELU()]
        for _ in range(n_down):
            nxt = max(ch // 2, base_channels)
            layers += [nn.ConvTranspose2d(ch, nxt, 4, stride=2, padding=1), nn.GroupNorm(8, nxt), nn.GELU()]
            ch = nxt
        layers += [nn.Conv2d(ch, 3, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.net(z))


@dataclass
class VqConfig:
    image_size: int = 64
    grid: int = 8  # latent grid side; image_size / 2**n_down
    n_codes: int = 64
    code_dim: int = 32
    base_channels: int = 32
    decay: float = 0.99
    beta: float = 0.25
    lr: float = 1e-3
    betas: tuple = (0.5, 0.9)
    batch_size: int = 16
    steps: int = 2000

    @property
    def n_down(self) -> int:
        n = int(round(math.log2(self.image_size / self.grid)))
        if self.grid * (2**n) != self.image_size:
            raise ShapeError(f"grid {self.grid} must divide image_size {self.image_size} by a power of 2")
        return n


class VqVae(nn.Module):
    """Pixel-space autoencoder over a discrete latent grid."""

    def __init__(self, config: VqConfig):
        super().__init__()
        self.config = config
        self.encoder = _Encoder(config.base_channels, config.n_down, config.code_dim)
        self.decoder = _Decoder(config.base_channels, config.n_down, config.code_dim)
        self.quantizer = VectorQuantizerEma(config.n_codes, config.code_dim, config.decay)
        self.frozen = False

    def _check_input(self, images: torch.Tensor) -> None:
        s = self.config.image_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != s or images.shape[3] != s:
            raise ShapeError(f"expected (B,3,{s},{s}) images, got {tuple(images.shape)}")

    def encode(self, images: torch.Tensor):
        """(latent grid (B,H',W',d), code indices (B,H',W'))."""
        self._check_input(images)
        z = self.encoder(images)  # (B,d,H',W')
        b, d, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, d)
        idx = self.quantizer.assign(flat)
        return z.permute(0, 2, 3, 1), idx.view(b, h, w)

    def train_step(self, images: torch.Tensor, optimizer: torch.optim.Optimizer) -> dict:
        """One optimization step; returns the loss components."""
        self._check_input(images)
        z = self.encoder(images)
        b, d, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, d)
        idx = self.quantizer.assign(flat)
        z_q = self.quantizer.codebook[idx]
        commitment = self.config.beta * F.mse_loss(flat, z_q.detach())
        z_st = flat + (z_q - flat).detach()  # straight-through estimator
        recon = self.decoder(z_st.view(b, h, w, d).permute(0, 3, 1, 2))
        reconstruction = F.mse_loss(recon, images)
        loss = reconstruction + commitment
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite tokenizer loss: recon={reconstruction.item()}, commit={commitment.item()}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        self.quantizer.update(flat.detach(), idx)
        return {
            "reconstruction": float(reconstruction.detach()),
            "commitment": float(commitment.detach()),
            "total": float(loss.detach()),
        }

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def tokenize_image(self, images: torch.Tensor) -> torch.Tensor:
        """Code-index grid for frozen inference; (B,H',W') int64."""
        if not self.frozen:
            raise StateError("tokenizer must be frozen before offline tokenization")
        _, idx = self.encode(images)
        return idx

    def state_tensors(self) -> dict:
        return {k: v for k, v in self.state_dict().items()}


def train_tokenizer(images: np.ndarray, config: VqConfig, seed: int, log_every: int = 200) -> tuple:
    """Train on an array of HWC float images; returns (model, history).

    Deterministic: model init, batch order, and k-means warmup all derive
    from the seed.
    """
    seed_torch(seed, "vq-init")
    model = VqVae(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    n = len(images)
    data = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()

    warm_rng = derive_rng(seed, "vq-warmup")
    warm_idx = warm_rng.choice(n, size=min(n, 4 * config.batch_size), replace=False)
    with torch.no_grad():
        z = model.encoder(data[warm_idx])
        flat = z.permute(0, 2, 3, 1).reshape(-1, z.shape[1])
    model.quantizer.kmeans_init(flat, derive_rng(seed, "vq-kmeans"))

    history = []
    t0 = time.time()
    for step in range(config.steps):
        rng = derive_rng(seed, "vq-step", step)
        batch = data[rng.choice(n, size=min(config.batch_size, n), replace=False)]
        try:
            losses = model.train_step(batch, optimizer)
        except NumericError as e:
            raise TrainingError(f"tokenizer training diverged at step {step}") from e
        if step % log_every == 0 or step == config.steps - 1:
            history.append({"step": step, **losses, "wall_s": time.time() - t0})
            logger.info("vq step %d recon %.5f commit %.5f", step, losses["reconstruction"], losses["commitment"])
    return model, history


def codebook_utilization(model: VqVae, images: np.ndarray, batch_size: int = 64) -> float:
    """Fraction of codewords assigned at least once over the given images."""
    data = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()
    used = torch.zeros(model.config.n_codes, dtype=torch.bool)
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            _, idx = model.encode(data[i: i + batch_size])
            used[idx.flatten()] = True
    return float(used.float().mean())


def save_tokenizer(model: VqVae, path, config_hash: str = "") -> None:
    save_checkpoint(
        path,
        model.state_tensors(),
        config_hash=config_hash,
        extras={
            "kind": "vq-tokenizer",
            "vq_config": {
                "image_size": model.config.image_size,
                "grid": model.config.grid,
                "n_codes": model.config.n_codes,
                "code_dim": model.config.code_dim,
                "base_channels": model.config.base_channels,
                "decay": model.config.decay,
                "beta": model.config.beta,
            },
        },
    )


def load_tokenizer(path, frozen: bool = True) -> VqVae:
    tensors, header = load_checkpoint(path)
    cfg = VqConfig(**{**header["extras"]["vq_config"]})
    model = VqVae(cfg)
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    model.load_state_dict(state)
    if frozen:
        model.freeze()
    return model


# ---------------------------------------------------------------------------
# Block-wise masking
# ---------------------------------------------------------------------------

@dataclass
class BlockMask:
    mask: np.ndarray  # (H, W) bool
    blocks: list = field(default_factory=list)  # (height, width, (y, x))

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())


def _legal_block_shapes(h_max: int, w_max: int, min_patches: int, max_patches: int, aspect) -> list:
    lo, hi = aspect
    shapes = []
    for h in range(1, min(h_max, max_patches) + 1):
        for w in range(1, min(w_max, max_patches) + 1):
            if min_patches <= h * w <= max_patches and lo <= h / w <= hi:
                shapes.append((h, w))
    return shapes


def block_mask(
    grid_shape,
    ratio: float = 0.25,
    min_patches: int = 4,
    max_patches: int = 8,
    aspect=(1 / 3, 3),
    rng: np.random.Generator | None = None,
) -> BlockMask:
    """Union of random rectangles until the masked fraction reaches ratio.

    Each rectangle's area lies in [min_patches, max_patches] and its
    height/width ratio within the aspect bounds. If the grid admits no legal
    rectangle at all, falls back to masking ceil(ratio*cells) random cells.
    """
    rng = rng if rng is not None else np.random.default_rng()
    h_max, w_max = int(grid_shape[0]), int(grid_shape[1])
    cells = h_max * w_max
    mask = np.zeros((h_max, w_max), dtype=bool)

    shapes = _legal_block_shapes(h_max, w_max, min_patches, max_patches, aspect)
    if not shapes:
        n = math.ceil(ratio * cells)
        flat = rng.choice(cells, size=min(n, cells), replace=False)
        mask.flat[flat] = True
        return BlockMask(mask=mask, blocks=[])

    blocks = []
    lo, hi = aspect
    while mask.mean() < ratio:
        hw = None
        for _ in range(64):
            area = int(rng.integers(min_patches, max_patches + 1))
            a = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            bh = int(round(math.sqrt(area * a)))
            bw = int(round(math.sqrt(area / a)))
            if bh < 1 or bw < 1 or bh > h_max or bw > w_max:
                continue
            if not (min_patches <= bh * bw <= max_patches and lo <= bh / bw <= hi):
                continue
            hw = (bh, bw)
            break
        if hw is None:
            hw = shapes[int(rng.integers(len(shapes)))]
        bh, bw = hw
        y = int(rng.integers(h_max - bh + 1))
        x = int(rng.integers(w_max - bw + 1))
        mask[y: y + bh, x: x + bw] = True
        blocks.append((bh, bw, (y, x)))
    return BlockMask(mask=mask, blocks=blocks)


def tokenize_split(model: VqVae, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Offline code grids for every image; (N, H', W') int64."""
    data = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()
    grids = []
    for i in range(0, len(data), batch_size):
        grids.append(model.tokenize_image(data[i: i + batch_size]).numpy())
    return np.concatenate(grids, axis=0)


def write_code_cache(path, image_paths, grids: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for p, g in zip(image_paths, grids):
            f.write(json.dumps({"image_path": p, "grid": [int(v) for v in g.flatten()], "shape": list(g.shape)}) + "\n")


def read_code_cache(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            out[d["image_path"]] = np.array(d["grid"], dtype=np.int64).reshape(d["shape"])
    return out
