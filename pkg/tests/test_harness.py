import json

import numpy as np
import pytest
import torch
from scipy import stats
from scipy.ndimage import uniform_filter

from sketchpaint.checkpoint import load_checkpoint, restore_rng, save_checkpoint
from sketchpaint.cli import main
from sketchpaint.config import TrainConfig
from sketchpaint.datagen import generate, synth_corpus, write_dataset
from sketchpaint.errors import IngestionError, IntegrityError, ParameterError, VersionError
from sketchpaint.features import dump_features
from sketchpaint.infer import infer, infer_batch
from sketchpaint.metrics import (PSNR_INF, compute_metrics, masked_l2, psnr, register_metric, ssim,
                                 unregister_metric)
from sketchpaint.train import derive_mask, draw_mask_types, train
from sketchpaint.unet import UNetConfig
from sketchpaint.vae import PoolVAE

from conftest import TINY, make_model, randomize_adapters


def tiny_train_config(**kw):
    base = dict(steps=3, batch_size=2, image_size=64, latent_size=8, identity_vae=True, log_every=0,
                base_steps=0, learning_rate=1e-3, unet=TINY)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return write_dataset(generate(synth_corpus(4, 64, 0), seed=0), root)


def test_config_round_trip_is_byte_identical(tmp_path):
    cfg = TrainConfig(learning_rate=3e-4, mask_mix=(0.5, 0.25, 0.25), unet=UNetConfig(base_width=16))
    text = cfg.dumps()
    assert TrainConfig.loads(text).dumps() == text
    cfg.save(tmp_path / "c.txt")
    assert TrainConfig.load(tmp_path / "c.txt") == cfg


def test_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(mask_mix=(0.6, 0.3, 0.2))
    with pytest.raises(ParameterError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(IngestionError) as err:
        TrainConfig.loads("steps = 3\nno equals sign\n")
    assert err.value.line == 2


def test_mask_mix_frequencies():
    draws = draw_mask_types(np.random.default_rng(0), 10_000)
    counts = np.bincount(draws, minlength=3)
    assert np.all(np.abs(counts / 1e4 - [0.6, 0.3, 0.1]) <= 0.02)
    assert stats.chisquare(counts, [6000, 3000, 1000]).pvalue > 0.01


def test_derived_masks():
    m0 = np.zeros((8, 8), bool)
    m0[2:4, 3:6] = True
    m0[5, 1] = True
    assert np.array_equal(derive_mask("segmentation", m0, None), (~m0).astype(np.float32))
    bbox = derive_mask("bbox", m0, None)
    assert bbox[2:6, 1:6].sum() == 0 and bbox.sum() == 64 - 20
    with pytest.raises(ValueError):
        derive_mask("lasso", m0, None)


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = randomize_adapters(make_model())
    vae = PoolVAE()
    gen = torch.Generator().manual_seed(5)
    gen.seed()
    path = save_checkpoint(model, tmp_path / "m.ckpt", vae=vae, config=tiny_train_config(), step=7,
                           generator=gen, rng=np.random.default_rng(1))
    ck = load_checkpoint(path)
    assert ck.step == 7 and ck.config == tiny_train_config()
    for (n, a), (m, b) in zip(model.state_dict().items(), ck.model.state_dict().items()):
        assert n == m and a.dtype == b.dtype and torch.equal(a, b)
    g2, r2 = restore_rng(ck.header)
    assert torch.equal(torch.rand(3, generator=g2), torch.rand(3, generator=gen))
    assert r2.random() == np.random.default_rng(1).random()


def test_truncated_or_corrupt_checkpoint_refused(tmp_path):
    path = save_checkpoint(make_model(), tmp_path / "m.ckpt")
    data = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "t.ckpt")
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 1
    (tmp_path / "f.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "f.ckpt")


def test_config_mismatch_names_field(tmp_path):
    path = save_checkpoint(make_model(), tmp_path / "m.ckpt")
    with pytest.raises(VersionError, match="base_width"):
        load_checkpoint(path, expected_config=UNetConfig(base_width=16, text_embed_dim=8, max_tokens=6))


def test_zero_steps_equals_initialization(dataset, tmp_path):
    res = train(tiny_train_config(steps=0), dataset, tmp_path)
    fresh = make_model(TINY, seed=0)
    ck = load_checkpoint(res.checkpoint)
    for (n, a), b in zip(fresh.state_dict().items(), ck.model.state_dict().values()):
        assert torch.equal(a, b), n


def test_training_keeps_frozen_groups_and_logs(dataset, tmp_path):
    seen = []
    res = train(tiny_train_config(steps=4, log_every=2), dataset, tmp_path, log_fn=seen.append)
    fresh = make_model(TINY, seed=0)
    ref = dict(fresh.named_parameters())
    for n, p in res.model.named_parameters():
        if n.startswith(("base.", "text.")):
            assert torch.equal(p, ref[n]), n
    assert any(l.startswith("step 2 ") for l in seen)
    assert sum(res.mask_type_counts) == 8
    assert len(res.losses) == 4


def test_base_pretraining_updates_then_freezes_base():
    from sketchpaint.train import pretrain_base
    model = make_model()
    before = {n: p.clone() for n, p in model.base.named_parameters()}
    pretrain_base(model, PoolVAE(), tiny_train_config(base_steps=3, base_corpus=8, base_batch_size=2))
    assert any(not torch.equal(p, before[n]) for n, p in model.base.named_parameters())
    assert not any(p.requires_grad for p in model.base.parameters())
    assert all(p.requires_grad for p in model.sbfi.parameters())


def test_bad_manifest_line_reported(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("\n[]\n")
    with pytest.raises(IngestionError) as err:
        train(tiny_train_config(), p)
    assert err.value.line == 2


def _inputs(seed=0, n=1):
    rng = np.random.default_rng(seed)
    img = rng.random((n, 3, 64, 64)).astype(np.float32)
    pm = (rng.random((n, 1, 64, 64)) > 0.5).astype(np.float32)
    sk = (rng.random((n, 1, 64, 64)) > 0.9).astype(np.float32)
    return torch.from_numpy(img), torch.from_numpy(pm), torch.from_numpy(sk)


def test_infer_all_visible_returns_input():
    model, vae = randomize_adapters(make_model()), PoolVAE()
    img, _, sk = _inputs()
    out = infer_batch(model, vae, img, torch.ones(1, 1, 64, 64), sk, ["x"], steps=3)
    assert torch.equal(out, img)


def test_infer_deterministic_and_visible_exact():
    model, vae = randomize_adapters(make_model()), PoolVAE()
    img, pm, sk = _inputs(1)
    a = infer(model, vae, img[0].permute(1, 2, 0).numpy(), pm[0, 0].numpy(), sk[0, 0].numpy(), "a bird", 4)
    b = infer(model, vae, img[0].permute(1, 2, 0).numpy(), pm[0, 0].numpy(), sk[0, 0].numpy(), "a bird", 4)
    assert a.tobytes() == b.tobytes()
    vis = pm[0, 0].numpy().astype(bool)
    assert np.array_equal(a[vis], img[0].permute(1, 2, 0).numpy()[vis])


def test_infer_shape_errors():
    from sketchpaint.errors import ShapeError
    model, vae = make_model(), PoolVAE()
    img, pm, sk = _inputs()
    with pytest.raises(ShapeError):
        infer_batch(model, vae, img, pm[..., :32, :32], sk, ["x"], steps=2)
    with pytest.raises(ShapeError):
        infer_batch(model, vae, img, pm, sk, ["x"], steps=2, image_size=128)


def test_metrics_identity_and_offset():
    rng = np.random.default_rng(0)
    gt = rng.random((16, 16, 3)) * 0.8
    pm = np.ones((16, 16))
    pm[4:12, 4:12] = 0
    assert masked_l2(gt, gt, pm) == 0
    assert psnr(gt, gt, pm) == PSNR_INF
    assert ssim(gt, gt, pm) == pytest.approx(1.0, abs=1e-12)
    assert masked_l2(gt + 0.1, gt, pm) == pytest.approx(0.01, abs=1e-12)
    assert psnr(gt + 0.1, gt, pm) == pytest.approx(20.0)
    # visible pixels do not count in masked mode
    off = gt.copy()
    off[pm == 1] += 0.5
    assert masked_l2(off, gt, pm) == 0
    assert compute_metrics("x", off, gt, pm, "whole").l2 > 0


def ssim_oracle(a, b, w=11):
    """Explicit windowed statistics over a reflect-padded canvas, pixel by pixel."""
    r = w // 2
    pa, pb = np.pad(a, r, mode="symmetric"), np.pad(b, r, mode="symmetric")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    out = np.zeros(a.shape)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            x = pa[i:i + w, j:j + w].ravel()
            y = pb[i:i + w, j:j + w].ravel()
            mx, my = x.mean(), y.mean()
            vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
            cxy = ((x - mx) * (y - my)).mean()
            out[i, j] = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return out.mean()


def test_ssim_matches_windowed_oracle():
    rng = np.random.default_rng(3)
    a = rng.random((11, 11))
    b = np.clip(a + 0.1 * rng.standard_normal((11, 11)), 0, 1)
    assert abs(ssim(a, b) - ssim_oracle(a, b)) <= 1e-6
    # sanity against the library filter with the same conventions
    assert uniform_filter(a, 11, mode="reflect").shape == a.shape


def test_metric_plugins_fill_slots():
    register_metric("lpips", lambda p, t, m: 0.25)
    try:
        r = compute_metrics("s", np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4)))
        assert r.external["lpips"] == 0.25 and r.external["fid"] is None
        assert json.loads(r.to_json())["psnr"] == "inf"
    finally:
        unregister_metric("lpips")


def test_dump_features_untrained_and_ranges(tmp_path):
    model, vae = make_model(), PoolVAE()
    s = synth_corpus(1, 64, 0)[0]
    pm = np.ones((64, 64), np.float32)
    pm[:, 32:] = 0
    q = dump_features(model, vae, s.image, pm, np.zeros((64, 64)), s.caption, tmp_path, scale=1)
    for name in ("x_hat", "x_hat_neg", "vm_gamma", "vm_gamma_neg", "vm_beta", "vm_beta_neg"):
        assert not q[name].any()
        assert (tmp_path / f"{name}.png").exists()
    assert q["vm"].dtype == np.uint8


def test_dump_features_difference_property(tmp_path):
    model, vae = randomize_adapters(make_model(), scale=0.5), PoolVAE()
    s = synth_corpus(1, 64, 1)[0]
    pm = np.ones((64, 64), np.float32)
    pm[20:50] = 0
    sk = np.zeros((64, 64))
    sk[30, :] = 1
    q = dump_features(model, vae, s.image, pm, sk, s.caption, tmp_path, scale=1)
    maps = np.load(tmp_path / "maps.npz")
    scales = json.loads((tmp_path / "scales.json").read_text())
    vm = maps["vm"]
    assert np.all(np.abs(q["vm"] / 255.0 - vm) <= 0.5 / 255 + 1e-12)
    diff = (q["sn_hat"].astype(float) - q["n_hat"].astype(float)) / 255
    exported_x = (q["x_hat"].astype(float) - q["x_hat_neg"].astype(float)) / 255
    assert np.array_equal(diff, exported_x)
    raw = (maps["sn_hat"] - maps["n_hat"]) / scales["span"]
    assert np.max(np.abs(exported_x - raw)) <= 1 / 255 + 1e-12
    assert np.abs(raw).max() > 1 / 255  # the check is not vacuous


def test_cli_end_to_end(tmp_path, capsys):
    corpus, ds, run = tmp_path / "corpus", tmp_path / "ds", tmp_path / "run"
    assert main(["synth-corpus", "--out", str(corpus), "--n", "3", "--size", "64"]) == 0
    assert main(["datagen", "--corpus", str(corpus), "--out", str(ds)]) == 0
    manifest = ds / "manifest.jsonl"
    assert main(["train", "--manifest", str(manifest), "--out", str(run), "--steps", "3", "--batch-size", "2",
                 "--image-size", "64", "--latent-size", "8", "--identity-vae", "true", "--log-every", "0",
                 "--base-steps", "0",
                 "--unet.base-width", "8", "--unet.text-embed-dim", "8", "--unet.max-tokens", "6"]) == 0
    ckpt = run / "checkpoint.ckpt"
    assert ckpt.exists() and (run / "loss.png").exists()
    assert TrainConfig.load(run / "config.txt").steps == 3
    rec = json.loads(manifest.read_text().splitlines()[0])
    out_png = tmp_path / "out.png"
    assert main(["infer", "--checkpoint", str(ckpt), "--masked-image", str(ds / rec["masked_image"]),
                 "--mask", str(ds / rec["partial_mask"]), "--sketch", str(ds / rec["partial_sketch"]),
                 "--caption", rec["caption"], "--out", str(out_png), "--steps", "2"]) == 0
    assert out_png.exists()
    report = tmp_path / "report.jsonl"
    assert main(["evaluate", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--out", str(report),
                 "--steps", "2", "--panels", str(tmp_path / "panels.png"), "--panel-rows", "2"]) == 0
    lines = [json.loads(l) for l in report.read_text().splitlines()]
    assert len(lines) == 4 and lines[-1]["summary"] and lines[-1]["count"] == 3
    assert (tmp_path / "panels.png").exists()
    assert main(["dump-features", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                 "--out", str(tmp_path / "feat")]) == 0
    assert (tmp_path / "feat" / "vm.png").exists()
