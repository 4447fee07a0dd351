"""VQ tokenizer: quantization, EMA codebook, training, block masks."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fvl.data import DataConfig, generate_catalog, quantize_image, render_view
from fvl.errors import IntegrityError, ShapeError, StateError
from fvl.seeding import derive_rng, seed_torch
from fvl.vq import (
    BlockMask,
    VqConfig,
    VqVae,
    block_mask,
    codebook_utilization,
    ema_update,
    load_tokenizer,
    nearest_code,
    save_tokenizer,
    tokenize_split,
    train_tokenizer,
)


def ema_reference(codebook, counts, sums, latents, assignments, decay, eps=1e-5):
    """Independent numpy transcription of the EMA contract."""
    v, d = codebook.shape
    bc = np.zeros(v)
    bs = np.zeros((v, d))
    for x, j in zip(latents, assignments):
        bc[j] += 1.0
        bs[j] += x
    nc = decay * counts + (1 - decay) * bc
    ns = decay * sums + (1 - decay) * bs
    nb = ns / np.maximum(nc, eps)[:, None]
    return nb, nc, ns


class TestNearestCode:
    def test_exact_codeword_match(self):
        cb = torch.randn(8, 4, generator=torch.Generator().manual_seed(0))
        idx = nearest_code(cb[3:4], cb)
        assert int(idx[0]) == 3
        assert torch.allclose(cb[idx[0]], cb[3])

    def test_brute_force_nearest(self):
        cb = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
        z = torch.tensor([[0.2, 0.1]])
        assert int(nearest_code(z, cb)[0]) == 0

    def test_tie_breaks_to_lowest_index(self):
        cb = torch.tensor([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        z = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
        idx = nearest_code(z, cb)
        assert idx.tolist() == [0, 0]

    def test_quantization_idempotent(self):
        g = torch.Generator().manual_seed(4)
        cb = torch.randn(16, 6, generator=g)
        z = torch.randn(40, 6, generator=g)
        idx1 = nearest_code(z, cb)
        idx2 = nearest_code(cb[idx1], cb)
        assert torch.equal(idx1, idx2)


class TestEmaUpdate:
    def test_matches_closed_form_reference(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            v, d, n = 12, 6, 64
            cb = rng.normal(size=(v, d))
            counts = rng.uniform(0.1, 5.0, size=v)
            sums = rng.normal(size=(v, d))
            lat = rng.normal(size=(n, d))
            assign = rng.integers(0, v, size=n)
            nb, nc, ns = ema_update(
                torch.tensor(cb), torch.tensor(counts), torch.tensor(sums),
                torch.tensor(lat), torch.tensor(assign), decay=0.99,
            )
            rb, rc, rs = ema_reference(cb, counts, sums, lat, assign, decay=0.99)
            assert np.abs(nb.numpy() - rb).max() < 1e-6
            assert np.abs(nc.numpy() - rc).max() < 1e-6
            assert np.abs(ns.numpy() - rs).max() < 1e-6

    def test_converges_to_constant_latent(self):
        # scalar fixed-point oracle: repeated updates with every latent == c
        c = torch.tensor([[0.37, -0.81]])
        cb = torch.tensor([[0.1, 0.1]])
        counts = torch.tensor([1.0])
        sums = cb.clone()
        lat = c.repeat(32, 1)
        assign = torch.zeros(32, dtype=torch.long)
        for _ in range(500):
            cb, counts, sums = ema_update(cb, counts, sums, lat, assign, decay=0.99)
        assert torch.abs(cb - c).max() < 1e-3

    def test_unassigned_code_drifts_below_1e6(self):
        cb = torch.tensor([[0.5, 0.5], [2.0, -2.0]])
        counts = torch.tensor([3.0, 4.0])
        sums = cb * counts[:, None]
        lat = torch.tensor([[0.5, 0.49]] * 8)
        assign = torch.zeros(8, dtype=torch.long)  # code 1 gets nothing
        nb, _, _ = ema_update(cb, counts, sums, lat, assign, decay=0.99)
        assert torch.abs(nb[1] - cb[1]).max() < 1e-6

    def test_zero_decay_gives_batch_mean(self):
        rng = np.random.default_rng(6)
        lat = torch.tensor(rng.normal(size=(20, 3)))
        assign = torch.tensor(rng.integers(0, 4, size=20))
        cb = torch.tensor(rng.normal(size=(4, 3)))
        counts = torch.ones(4)
        sums = cb.clone()
        nb, _, _ = ema_update(cb, counts, sums, lat, assign, decay=0.0)
        for j in range(4):
            sel = lat[assign == j]
            if len(sel):
                assert torch.allclose(nb[j], sel.mean(0), atol=1e-9)


def _toy_images(n=24, size=16, seed=3):
    cat = generate_catalog(DataConfig(n_products=n, image_size=size), seed=seed)
    return np.stack([quantize_image(render_view(p, 0, size)) for p in cat.products])


class TestVqVae:
    def test_encode_shapes_and_mismatch(self):
        cfg = VqConfig(image_size=16, grid=4, n_codes=8, code_dim=8, base_channels=8)
        seed_torch(0, "t")
        model = VqVae(cfg)
        imgs = torch.rand(2, 3, 16, 16)
        grid, idx = model.encode(imgs)
        assert grid.shape == (2, 4, 4, 8)
        assert idx.shape == (2, 4, 4)
        assert int(idx.max()) < 8
        with pytest.raises(ShapeError):
            model.encode(torch.rand(2, 3, 8, 8))

    def test_commitment_zero_when_codebook_matches_latent(self):
        cfg = VqConfig(image_size=4, grid=1, n_codes=1, code_dim=4, base_channels=8)
        seed_torch(1, "t")
        model = VqVae(cfg)
        img = torch.rand(1, 3, 4, 4)
        with torch.no_grad():
            z = model.encoder(img).permute(0, 2, 3, 1).reshape(-1, 4)
            model.quantizer.codebook.copy_(z)
        grid, idx = model.encode(img)
        flat = grid.reshape(-1, 4)
        commitment = torch.nn.functional.mse_loss(flat, model.quantizer.codebook[idx.flatten()]).detach()
        assert float(commitment) == 0.0

    def test_beta_zero_commitment_component_zero(self):
        cfg = VqConfig(image_size=16, grid=4, n_codes=8, code_dim=8, base_channels=8, beta=0.0)
        seed_torch(2, "t")
        model = VqVae(cfg)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        out = model.train_step(torch.rand(2, 3, 16, 16), opt)
        assert out["commitment"] == 0.0
        assert out["total"] == pytest.approx(out["reconstruction"], abs=1e-7)

    def test_loss_decreases_over_200_steps(self):
        imgs = _toy_images()
        cfg = VqConfig(image_size=16, grid=4, n_codes=16, code_dim=8, base_channels=8, steps=200, batch_size=8)
        model, history = train_tokenizer(imgs, cfg, seed=0, log_every=10)
        first = np.mean([h["total"] for h in history[:3]])
        last = np.mean([h["total"] for h in history[-3:]])
        assert last < first

    def test_training_deterministic(self):
        imgs = _toy_images(n=12)
        cfg = VqConfig(image_size=16, grid=4, n_codes=8, code_dim=8, base_channels=8, steps=30, batch_size=8)
        _, h1 = train_tokenizer(imgs, cfg, seed=4, log_every=5)
        _, h2 = train_tokenizer(imgs, cfg, seed=4, log_every=5)
        for a, b in zip(h1, h2):
            assert a["total"] == b["total"]

    def test_tokenize_requires_frozen_and_is_deterministic(self):
        cfg = VqConfig(image_size=16, grid=4, n_codes=8, code_dim=8, base_channels=8)
        seed_torch(3, "t")
        model = VqVae(cfg)
        imgs = torch.rand(2, 3, 16, 16)
        with pytest.raises(StateError):
            model.tokenize_image(imgs)
        model.freeze()
        a = model.tokenize_image(imgs)
        b = model.tokenize_image(imgs)
        assert torch.equal(a, b)
        assert a.shape == (2, 4, 4)

    def test_checkpoint_round_trip_and_corruption(self, tmp_path):
        cfg = VqConfig(image_size=16, grid=4, n_codes=8, code_dim=8, base_channels=8)
        seed_torch(5, "t")
        model = VqVae(cfg)
        path = tmp_path / "vq.ckpt"
        save_tokenizer(model, path, config_hash="h")
        loaded = load_tokenizer(path)
        for k, v in model.state_dict().items():
            assert torch.equal(loaded.state_dict()[k], v)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError):
            load_tokenizer(path)

    def test_trained_tokenizer_separates_colors(self):
        cat = generate_catalog(DataConfig(n_products=40, image_size=16), seed=8)
        imgs = np.stack([quantize_image(render_view(p, 0, 16)) for p in cat.products])
        cfg = VqConfig(image_size=16, grid=4, n_codes=16, code_dim=8, base_channels=8, steps=300, batch_size=8)
        model, _ = train_tokenizer(imgs, cfg, seed=1)
        model.freeze()
        p = next(q for q in cat.products if q.attributes["color"] == "red")
        from dataclasses import replace

        q = replace(p, attributes={**p.attributes, "color": "blue"})
        a = model.tokenize_image(torch.from_numpy(quantize_image(render_view(p, 0, 16)).transpose(2, 0, 1)[None]).float())
        b = model.tokenize_image(torch.from_numpy(quantize_image(render_view(q, 0, 16)).transpose(2, 0, 1)[None]).float())
        assert not torch.equal(a, b)

    def test_utilization_metric(self):
        imgs = _toy_images(n=12)
        cfg = VqConfig(image_size=16, grid=4, n_codes=8, code_dim=8, base_channels=8, steps=30, batch_size=8)
        model, _ = train_tokenizer(imgs, cfg, seed=2)
        model.freeze()
        u = codebook_utilization(model, imgs)
        assert 0.0 <= u <= 1.0

    def test_tokenize_split_matches_encode(self):
        imgs = _toy_images(n=6)
        cfg = VqConfig(image_size=16, grid=4, n_codes=8, code_dim=8, base_channels=8)
        seed_torch(6, "t")
        model = VqVae(cfg)
        model.freeze()
        grids = tokenize_split(model, imgs, batch_size=4)
        assert grids.shape == (6, 4, 4)
        one = model.tokenize_image(torch.from_numpy(imgs[2].transpose(2, 0, 1)[None]).float())
        assert np.array_equal(grids[2], one[0].numpy())


class TestBlockMask:
    def test_8x8_quarter_ratio_bounds(self):
        rng = derive_rng(0, "bm")
        for _ in range(50):
            bm = block_mask((8, 8), ratio=0.25, rng=rng)
            masked = int(bm.mask.sum())
            assert 16 <= masked <= 16 + 8 - 1

    def test_block_size_and_aspect_constraints(self):
        rng = derive_rng(1, "bm")
        for _ in range(200):
            bm = block_mask((8, 8), ratio=0.25, rng=rng)
            for h, w, _ in bm.blocks:
                assert 4 <= h * w <= 8
                assert 1 / 3 <= h / w <= 3

    def test_2x2_grid_masks_everything(self):
        bm = block_mask((2, 2), ratio=0.25, min_patches=4, rng=derive_rng(2))
        assert bm.mask.all()
        assert bm.blocks == [(2, 2, (0, 0))]

    def test_degenerate_grid_falls_back_to_random_cells(self):
        bm = block_mask((1, 3), ratio=0.25, min_patches=4, rng=derive_rng(3))
        assert int(bm.mask.sum()) == math.ceil(0.25 * 3)
        assert bm.blocks == []

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_fraction_bounds_property(self, seed):
        bm = block_mask((8, 8), ratio=0.25, rng=derive_rng(seed))
        assert 0.25 <= bm.fraction <= 0.25 + 8 / 64

    def test_expected_fraction_over_draws(self):
        rng = derive_rng(4, "bm")
        fracs = [block_mask((8, 8), ratio=0.25, rng=rng).fraction for _ in range(1000)]
        assert 0.25 <= float(np.mean(fracs)) <= 0.25 + 8 / 64
