"""End-to-end smoke tests for the python bindings."""

import math

import numpy as np
import pytest

import functakit as fk


@pytest.fixture(scope="module")
def tiny_state():
    spec = fk.MetaSpec()
    spec.siren.width = 8
    spec.siren.depth = 3
    spec.siren.out_dim = 3
    spec.latent = fk.LatentShape.spatial(2, 4)
    spec.map_kind = fk.MapKind.CONV1X1
    spec.interp = fk.InterpScheme.BILINEAR
    spec.resolution = 8
    cfg = fk.MetaConfig()
    cfg.seed = 1
    return fk.meta_init(spec, cfg)


def test_version():
    assert fk.__version__


def test_encode_decode_roundtrip(tiny_state):
    data = fk.synth_dataset(8, 3, 4, seed=0)
    assert data[0].shape == (3, 64)
    assert data[0].dtype == np.float32

    fit = fk.inner_fit(tiny_state, data[0])
    assert math.isfinite(fit.loss)
    img = fk.reconstruct(tiny_state, fit.z)
    assert img.shape == (3, 64)
    assert img.min() >= 0.0 and img.max() <= 1.0

    assert fk.psnr(img, img) == math.inf
    assert fk.psnr(img, data[0]) > 0.0


def test_functaset_io(tiny_state, tmp_path):
    data = fk.synth_dataset(8, 3, 5, seed=3)
    fs = fk.build_functaset(tiny_state, data, labels=[0, 1, 0, 1, 0])
    assert fs.count() == 5
    assert fs.dims() == 16
    assert list(fs.labels) == [0, 1, 0, 1, 0]

    path = str(tmp_path / "set.sfta")
    fk.save_functaset(fs, path)
    back = fk.load_functaset(path)
    assert back.count() == 5
    np.testing.assert_array_equal(back.latents, fs.latents)
    assert list(back.labels) == list(fs.labels)


def test_normalize_and_quantize(tiny_state):
    data = fk.synth_dataset(8, 3, 6, seed=4)
    fs = fk.build_functaset(tiny_state, data)
    stats = fk.compute_norm_stats(fs, fk.NormKind.VECTOR, gamma=1.0)
    normed = fk.normalize_columns(fs.latents, fs.shape, stats)
    back = fk.denormalize_columns(normed, fs.shape, stats)
    np.testing.assert_allclose(back, fs.latents, rtol=1e-5, atol=1e-6)

    q = fk.quantize(fs, 8)
    assert q.quantized()
    dq = fk.dequantize(q)
    span = fs.latents.max() - fs.latents.min()
    assert np.abs(dq.latents - fs.latents).max() <= span / 255.0


def test_classifier(tiny_state):
    rng = np.random.default_rng(0)
    n = 40
    fs = fk.Functaset()
    fs.shape = fk.LatentShape.vector(8)
    latents = rng.uniform(-0.3, 0.3, size=(8, n)).astype(np.float32)
    latents[0, : n // 2] += 2.0
    latents[0, n // 2 :] -= 2.0
    fs.latents = latents
    fs.labels = [0] * (n // 2) + [1] * (n // 2)

    cfg = fk.ClassifierConfig()
    cfg.width = 16
    cfg.ffw_width = 32
    cfg.blocks = 1
    cfg.lr = 1e-2
    cfg.epochs = 10
    cfg.ema_decay = 0.9
    cfg.seed = 5
    losses = []
    clf = fk.classify_train(fs, cfg, sink=lambda row: losses.append(row.loss))
    assert losses and all(math.isfinite(v) for v in losses)
    assert fk.classify_eval(clf, fs) >= 0.95

    sl = fk.smooth_labels(0, 0.1, 10)
    assert sl[0] == pytest.approx(0.91, abs=1e-12)
    assert sl[1] == pytest.approx(0.01, abs=1e-12)


def test_diffusion(tmp_path):
    sched = fk.make_schedule(fk.ScheduleKind.COSINE, 50)
    assert sched.alpha_bar[0] == 1.0
    assert np.all(sched.beta > 0) and np.all(sched.beta < 1)

    rng = np.random.default_rng(1)
    fs = fk.Functaset()
    fs.shape = fk.LatentShape.vector(6)
    fs.latents = rng.normal(size=(6, 64)).astype(np.float32)

    dcfg = fk.DenoiserConfig()
    dcfg.width = 16
    dcfg.blocks = 1
    state = fk.ddpm_init(dcfg, fk.ScheduleKind.COSINE, T=20, timestep_ratio=2.0,
                         dims=6, seed=7)
    tcfg = fk.DdpmTrainConfig()
    tcfg.steps = 30
    tcfg.batch_size = 16
    tcfg.seed = 8
    fk.ddpm_train(state, fs, tcfg)
    assert state.step == 30

    samples = fk.ddpm_sample(state, count=10, seed=9)
    assert samples.shape == (6, 10)
    assert np.all(np.isfinite(samples))

    report = fk.evaluate_generation(fs.latents, fs)
    assert report.mean_abs_diff < 1e-9
    assert report.cov_trace_rel_err < 1e-9
    assert report.audit is None

    path = str(tmp_path / "model.sfdm")
    fk.save_diffusion_state(state, path)
    back = fk.load_diffusion_state(path)
    np.testing.assert_array_equal(fk.ddpm_sample(back, 4, seed=2),
                                  fk.ddpm_sample(state, 4, seed=2))


def test_error_taxonomy(tmp_path):
    with pytest.raises(fk.IoError):
        fk.load_functaset(str(tmp_path / "missing.sfta"))
    assert issubclass(fk.IoError, fk.Error)
    assert issubclass(fk.BadMagicError, fk.FormatError)

    spec = fk.MetaSpec()  # resolution left at zero
    with pytest.raises(fk.ConfigError):
        fk.meta_init(spec, fk.MetaConfig())

    junk = tmp_path / "junk.sfta"
    junk.write_bytes(b"XXXXYYYYZZZZ" * 4)
    with pytest.raises(fk.BadMagicError):
        fk.load_functaset(str(junk))
