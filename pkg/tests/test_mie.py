import numpy as np
import pytest
import torch

from sketchpaint.errors import ShapeError
from sketchpaint.mie import MaskedImageEncoder, downsample_mask, inject, masked_latent
from sketchpaint.unet import EncoderTap, UNetConfig
from sketchpaint.vae import IdentityVAE, ToyVAE, reconstruction_error, train_vae, vae_decode, vae_encode

from conftest import TINY, make_bundle, make_model, randomize_adapters


def block_min_oracle(m: np.ndarray, f: int) -> np.ndarray:
    h, w = m.shape
    out = np.zeros((h // f, w // f), dtype=m.dtype)
    for i in range(h // f):
        for j in range(w // f):
            out[i, j] = 1 if np.all(m[i * f:(i + 1) * f, j * f:(j + 1) * f] == 1) else 0
    return out


def test_downsample_constant_masks():
    for value in (0, 1):
        levels = downsample_mask(np.full((128, 128), value, dtype=np.float32))
        assert [tuple(l.shape[-2:]) for l in levels] == [(16, 16), (8, 8), (4, 4), (2, 2)]
        assert all(torch.all(l == value) for l in levels)


def test_downsample_centered_square():
    m = np.zeros((512, 512), dtype=np.float32)
    m[128:384, 128:384] = 1
    levels = downsample_mask(m)
    assert [l.shape[-1] for l in levels] == [64, 32, 16, 8]
    expected = np.zeros((64, 64))
    expected[16:48, 16:48] = 1
    assert np.array_equal(levels[0][0, 0].numpy(), expected)
    for f, level in zip((8, 16, 32, 64), levels):
        assert np.array_equal(level[0, 0].numpy(), block_min_oracle(m, f))


def test_downsample_random_masks_match_block_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        m = (rng.random((128, 128)) > 0.02).astype(np.float32)
        for f, level in zip((8, 16, 32, 64), downsample_mask(m)):
            assert np.array_equal(level[0, 0].numpy(), block_min_oracle(m, f))


def test_downsample_rejects_bad_input():
    with pytest.raises(ValueError):
        downsample_mask(np.full((64, 64), 0.5))
    with pytest.raises(ShapeError):
        downsample_mask(np.ones((100, 100)))


def test_inject_identities():
    gen = torch.Generator().manual_seed(0)
    N = [torch.randn(2, c, s, s, generator=gen) for c, s in zip(TINY.channels, (8, 4, 2, 1))]
    M = [torch.randn_like(n) for n in N]
    zeros = [torch.zeros_like(n) for n in N]
    assert all(torch.equal(a, b) for a, b in zip(inject(N, zeros), N))
    assert all(torch.equal(a, b) for a, b in zip(inject(zeros, M), M))
    N64 = [n.double() for n in N]
    M64 = [m.double() for m in M]
    for out, n, m in zip(inject(N64, M64), N64, M64):
        assert torch.max(torch.abs((out - n) - m)) < 1e-15
    with pytest.raises(ShapeError):
        inject(N, M[:3])
    with pytest.raises(ShapeError):
        inject(N, [M[1]] + M[1:])


def _base_features(model, cond, z, t):
    tap = EncoderTap()
    with torch.no_grad():
        model.base(z, t, cond.text_embedding, tap)
    return tap.features


def test_mie_zero_at_init_and_shapes_align(tiny_model):
    cond = make_bundle(tiny_model)
    M = tiny_model.mie(cond.masked_latent, cond.mask_pyramid, 10)
    N = _base_features(tiny_model, cond, torch.randn(2, 4, 8, 8), 10)
    for m, n in zip(M, N):
        assert m.shape == n.shape
        assert torch.all(m == 0)


def test_mie_shapes_default_config():
    cfg = UNetConfig()
    torch.manual_seed(0)
    model = make_model(cfg)
    cond = make_bundle(model, latent=16, image=128)
    M = model.mie(cond.masked_latent, cond.mask_pyramid, 10)
    N = _base_features(model, cond, torch.randn(2, 4, 16, 16), 10)
    assert [m.shape for m in M] == [n.shape for n in N]


def test_mie_pyramid_mismatch_raises(tiny_model):
    cond = make_bundle(tiny_model)
    with pytest.raises(ShapeError):
        tiny_model.mie(cond.masked_latent, cond.mask_pyramid[::-1], 10)


def test_visible_pixel_perturbation_reaches_first_scale():
    model = randomize_adapters(make_model())
    torch.manual_seed(1)
    vae = ToyVAE()
    image = torch.rand(1, 3, 64, 64)
    pm = torch.ones(1, 1, 64, 64)
    pm[..., 32:, :] = 0
    pyramid = downsample_mask(pm)
    bumped = image.clone()
    bumped[0, :, 5, 7] += 0.3
    with torch.no_grad():
        a = model.mie(masked_latent(vae, image, pm), pyramid, 3)
        b = model.mie(masked_latent(vae, bumped, pm), pyramid, 3)
    assert not torch.equal(a[0], b[0])


def test_mie_ignores_corrupted_pixel_values():
    model = randomize_adapters(make_model())
    torch.manual_seed(1)
    vae = ToyVAE()
    pm = torch.ones(1, 1, 64, 64)
    pm[..., :, 20:50] = 0
    image = torch.rand(1, 3, 64, 64)
    other = torch.where(pm.bool(), image, torch.rand(1, 3, 64, 64))
    pyramid = downsample_mask(pm)
    with torch.no_grad():
        a = model.mie(masked_latent(vae, image, pm), pyramid, 3)
        b = model.mie(masked_latent(vae, other, pm), pyramid, 3)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_identity_at_init_full_model_equals_base(tiny_model):
    cond = make_bundle(tiny_model, batch=3)
    z = torch.randn(3, 4, 8, 8)
    t = torch.tensor([1, 500, 1000])
    with torch.no_grad():
        full = tiny_model(z, t, cond)
        base = tiny_model.base(z, t, cond.text_embedding)
    assert torch.max(torch.abs(full - base)) <= 1e-5 * torch.max(torch.abs(base))


def test_vae_latent_geometry():
    vae = ToyVAE()
    with torch.no_grad():
        assert vae_encode(torch.rand(1, 3, 512, 512), vae).shape == (1, 4, 64, 64)
        assert vae_decode(torch.randn(1, 4, 64, 64), vae).shape == (1, 3, 512, 512)
    with pytest.raises(ShapeError):
        vae_encode(torch.rand(1, 3, 100, 100), vae)
    ident = IdentityVAE()
    x = torch.randn(2, 4, 16, 16)
    assert torch.equal(vae_encode(x, ident), x)
    assert torch.equal(vae_decode(x, ident), x)
    with pytest.raises(ShapeError):
        vae_encode(torch.randn(2, 3, 16, 16), ident)


def test_toy_vae_heldout_error_within_recorded_validation_error():
    from sketchpaint.datagen import synth_corpus
    from sketchpaint.train import to_image_tensor

    samples = synth_corpus(96, 64, 5)
    images = torch.cat([to_image_tensor(s.image) for s in samples])
    vae = train_vae(images[:64], images[64:80], steps=300, seed=0)
    held_out = reconstruction_error(vae, images[80:])
    assert np.isfinite(vae.val_error.item())
    assert held_out < vae.val_error.item() * 1.10
    assert not any(p.requires_grad for p in vae.parameters())
