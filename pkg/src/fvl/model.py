"""Model core: convolutional grid-feature image encoder, one Transformer
usable as both text encoder and fusion encoder, and the projection heads.

The same Transformer parameters serve two roles. In text mode the input is
word + position embeddings (LayerNormed); in fusion mode modality embeddings
are added on top and image patch blocks are appended, with position indices
restarting at 0 for every patch block so multi-image inputs stay
well-defined. Image-side representations never pass through the
Transformer: they are average-pooled grid features from the image encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import LengthError, ShapeError, UsageError

TEXT_MODALITY = 0
IMAGE_MODALITY = 1


@dataclass
class ModelConfig:
    vocab_size: int
    image_size: int = 64
    grid: int = 8
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    latent_dim: int = 64
    n_codes: int = 64
    n_attributes: int = 16
    max_seq_len: int = 320
    dropout: float = 0.1
    share_text_fusion: bool = True
    base_channels: int = 32
    tau_init: float = 0.625
    mvc_pool_patches_only: bool = False

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_down(self) -> int:
        n = int(round(math.log2(self.image_size / self.grid)))
        if self.grid * (2**n) != self.image_size:
            raise ShapeError(f"grid {self.grid} must divide image_size {self.image_size} by a power of 2")
        return n


class ImageEncoder(nn.Module):
    """Strided conv stages ending in a H'xW' map, rasterized row-major and
    projected to model width."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        layers = [nn.Conv2d(3, config.base_channels, 3, padding=1), nn.GELU()]
        ch = config.base_channels
        for _ in range(config.n_down):
            nxt = min(2 * ch, 128)
            layers += [nn.Conv2d(ch, nxt, 3, stride=2, padding=1), nn.GroupNorm(8, nxt), nn.GELU()]
            ch = nxt
        self.net = nn.Sequential(*layers)
        self.proj = nn.Linear(ch, config.d_model)
        self.config = config

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        s = self.config.image_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != s or images.shape[3] != s:
            raise ShapeError(f"expected (B,3,{s},{s}) images, got {tuple(images.shape)}")
        fm = self.net(images)  # (B,C,H',W')
        b, c, h, w = fm.shape
        grid = fm.permute(0, 2, 3, 1).reshape(b, h * w, c)
        return self.proj(grid)  # (B,K,d_model)


@dataclass
class EncoderOutput:
    states: torch.Tensor  # (B, L, d)
    mask: torch.Tensor  # (B, L) bool, True where valid
    has_cls: bool = True


def pool(output: EncoderOutput, mode: str) -> torch.Tensor:
    """cls: position-0 state; avg: masked mean over valid positions."""
    if mode == "cls":
        if not output.has_cls:
            raise UsageError("cls pooling requested but the sequence has no [CLS] position")
        return output.states[:, 0, :]
    if mode == "avg":
        m = output.mask.to(output.states.dtype).unsqueeze(-1)
        return (output.states * m).sum(1) / m.sum(1).clamp(min=1.0)
    raise UsageError(f"unknown pooling mode {mode!r}")


def _make_transformer(config: ModelConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=config.d_model,
        nhead=config.n_heads,
        dim_feedforward=4 * config.d_model,
        dropout=config.dropout,
        activation="gelu",
        batch_first=True,
    )
    return nn.TransformerEncoder(layer, config.n_layers, enable_nested_tensor=False)


class VLModel(nn.Module):
    """Image encoder + shared text/fusion Transformer + task heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config)
        self.word_emb = nn.Embedding(config.vocab_size, config.d_model, padding_idx=0)
        self.pos_emb = nn.Embedding(config.max_seq_len, config.d_model)
        self.modality_emb = nn.Embedding(2, config.d_model)
        self.emb_ln = nn.LayerNorm(config.d_model)
        self.encoder = _make_transformer(config)
        if not config.share_text_fusion:
            self.fusion_encoder_separate = _make_transformer(config)
        # bias-free projections so L2 normalization is scale invariant
        self.proj_f = nn.Linear(config.d_model, config.latent_dim, bias=False)
        self.proj_g = nn.Linear(config.d_model, config.latent_dim, bias=False)
        self.log_tau = nn.Parameter(torch.tensor(float(math.log(config.tau_init))))
        self.head_itm = nn.Linear(config.d_model, 1)
        self.head_mlm = nn.Linear(config.d_model, config.vocab_size)
        self.head_mpfc = nn.Linear(config.d_model, config.n_codes)
        self.head_attr = nn.Linear(config.latent_dim, max(config.n_attributes, 1))

    # -- roles ------------------------------------------------------------

    @property
    def text_transformer(self) -> nn.TransformerEncoder:
        return self.encoder

    @property
    def fusion_transformer(self) -> nn.TransformerEncoder:
        if self.config.share_text_fusion:
            return self.encoder
        return self.fusion_encoder_separate

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    # -- encoders ----------------------------------------------------------

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """(B, K, d_model) grid features in raster order."""
        return self.image_encoder(images)

    def image_pooled(self, patches: torch.Tensor) -> torch.Tensor:
        return patches.mean(dim=1)

    def _text_embeddings(self, token_ids, modality: bool, word_zero_mask=None):
        b, t = token_ids.shape
        if t > self.config.max_seq_len:
            raise LengthError(f"text length {t} exceeds position budget {self.config.max_seq_len}")
        emb = self.word_emb(token_ids)
        if word_zero_mask is not None:
            emb = emb * (~word_zero_mask).unsqueeze(-1).to(emb.dtype)
        pos = self.pos_emb.weight[:t].unsqueeze(0)
        emb = emb + pos
        if modality:
            emb = emb + self.modality_emb.weight[TEXT_MODALITY]
        return self.emb_ln(emb)

    def _patch_embeddings(self, patches, patch_zero_mask=None):
        b, k, d = patches.shape
        if k > self.config.max_seq_len:
            raise LengthError(f"patch block length {k} exceeds position budget {self.config.max_seq_len}")
        if patch_zero_mask is not None:
            patches = patches * (~patch_zero_mask).unsqueeze(-1).to(patches.dtype)
        pos = self.pos_emb.weight[:k].unsqueeze(0)  # positions restart per block
        emb = patches + pos + self.modality_emb.weight[IMAGE_MODALITY]
        return self.emb_ln(emb)

    def encode_text(self, token_ids: torch.Tensor, attention_mask: torch.Tensor) -> EncoderOutput:
        """Text-encoder role: no modality embeddings, padding masked out."""
        emb = self._text_embeddings(token_ids, modality=False)
        valid = attention_mask.bool()
        states = self.text_transformer(emb, src_key_padding_mask=~valid)
        return EncoderOutput(states=states, mask=valid, has_cls=True)

    def encode_fusion(
        self,
        token_ids: torch.Tensor,
        attention_mask: torch.Tensor,
        patch_sets: torch.Tensor,
        set_mask: torch.Tensor | None = None,
        word_zero_mask: torch.Tensor | None = None,
        patch_zero_mask: torch.Tensor | None = None,
    ) -> EncoderOutput:
        """Fusion-encoder role over [text tokens; patch blocks...].

        patch_sets: (B, S, K, d) pre-encoded grid features, one block per
        image; set_mask (B, S) marks valid blocks. word_zero_mask (B, T) and
        patch_zero_mask (B, S, K) zero the corresponding *features* while
        keeping position/modality structure visible to attention.
        """
        if patch_sets.ndim == 3:
            patch_sets = patch_sets.unsqueeze(1)
            if patch_zero_mask is not None and patch_zero_mask.ndim == 2:
                patch_zero_mask = patch_zero_mask.unsqueeze(1)
        b, s, k, d = patch_sets.shape
        t = token_ids.shape[1]
        total = t + s * k
        if total > self.config.max_seq_len:
            raise LengthError(f"fusion length {total} exceeds position budget {self.config.max_seq_len}")

        text_emb = self._text_embeddings(token_ids, modality=True, word_zero_mask=word_zero_mask)
        flat_zero = patch_zero_mask.reshape(b * s, k) if patch_zero_mask is not None else None
        patch_emb = self._patch_embeddings(patch_sets.reshape(b * s, k, d), flat_zero)
        patch_emb = patch_emb.reshape(b, s * k, d)

        seq = torch.cat([text_emb, patch_emb], dim=1)
        text_valid = attention_mask.bool()
        if set_mask is None:
            patch_valid = torch.ones(b, s * k, dtype=torch.bool, device=seq.device)
        else:
            patch_valid = set_mask.bool().unsqueeze(-1).expand(b, s, k).reshape(b, s * k)
        valid = torch.cat([text_valid, patch_valid], dim=1)
        states = self.fusion_transformer(seq, src_key_padding_mask=~valid)
        return EncoderOutput(states=states, mask=valid, has_cls=True)

    # -- heads --------------------------------------------------------------

    def project(self, x: torch.Tensor, head: str) -> torch.Tensor:
        """Bias-free linear map into the unit-norm latent space."""
        if head == "f":
            y = self.proj_f(x)
        elif head == "g":
            y = self.proj_g(x)
        else:
            raise UsageError(f"unknown projection head {head!r}")
        return y / (y.norm(dim=-1, keepdim=True) + 1e-12)

    def text_latent(self, token_ids, attention_mask) -> torch.Tensor:
        """f(avg-pool(TE(text))): the text-side contrastive representation."""
        out = self.encode_text(token_ids, attention_mask)
        return self.project(pool(out, "avg"), "f")

    def image_latent(self, images: torch.Tensor) -> torch.Tensor:
        """g(avg-pool(image encoder grid)): the image-side representation."""
        return self.project(self.image_pooled(self.encode_image(images)), "g")

    def fusion_latent(
        self, token_ids, attention_mask, patch_sets, set_mask=None, word_zero_mask=None, patch_zero_mask=None
    ) -> torch.Tensor:
        """g(avg-pool(FE([text; patches]))): the compositional representation."""
        out = self.encode_fusion(token_ids, attention_mask, patch_sets, set_mask, word_zero_mask, patch_zero_mask)
        if self.config.mvc_pool_patches_only:
            t = token_ids.shape[1]
            out = EncoderOutput(states=out.states[:, t:, :], mask=out.mask[:, t:], has_cls=False)
        return self.project(pool(out, "avg"), "g")

    def state_tensors(self) -> dict:
        return {k: v for k, v in self.state_dict().items()}


def build_model(config: ModelConfig, seed: int | None = None) -> VLModel:
    if seed is not None:
        from .seeding import seed_torch

        seed_torch(seed, "model-init")
    return VLModel(config)
