from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from styleloop.datasets import save_image
from styleloop.metrics import (
    FEATURE_DIM,
    MetricsError,
    ToyExtractor,
    aesthetic_score,
    build_feature_net,
    default_extractor,
    evaluate,
    extract_features,
    fid,
    lpips,
    make_linear_scorer,
    ssim,
)

# -- feature extraction ---------------------------------------------------------


def test_extract_features_shape(rng):
    imgs = [rng.uniform(-1, 1, size=(3, 32, 32)).astype(np.float32) for _ in range(5)]
    feats = extract_features(imgs)
    assert feats.shape == (5, FEATURE_DIM)


def test_identical_images_identical_rows(rng):
    img = rng.uniform(-1, 1, size=(3, 32, 32)).astype(np.float32)
    feats = extract_features([img, img])
    np.testing.assert_array_equal(feats[0], feats[1])


def test_extractor_swap_changes_values_not_shape(rng):
    imgs = [rng.uniform(-1, 1, size=(3, 32, 32)).astype(np.float32) for _ in range(3)]
    a = extract_features(imgs)
    b = extract_features(imgs, extractor=ToyExtractor(seed=999))
    assert a.shape == b.shape
    assert not np.allclose(a, b)


def test_extract_features_empty_rejected():
    with pytest.raises(MetricsError):
        extract_features([])


# -- FID ------------------------------------------------------------------------


def test_fid_identical_matrices(rng):
    a = rng.standard_normal((10, 6))
    assert fid(a, a) == pytest.approx(0.0, abs=1e-8)


def test_fid_exact_moment_unit_gaussians():
    # four points engineered so the sample moments are exactly mu=0, cov=I
    a_val = math.sqrt(1.5)
    base = np.array([[a_val, 0.0], [-a_val, 0.0], [0.0, a_val], [0.0, -a_val]])
    shifted = base + np.array([1.0, 0.0])
    assert fid(base, shifted) == pytest.approx(1.0, abs=1e-8)


def test_fid_symmetry(rng):
    a = rng.standard_normal((30, 5))
    b = rng.standard_normal((25, 5)) + 0.3
    assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-8)


def test_fid_sampled_gaussians_match_closed_form(rng):
    """Diagonal-covariance Gaussians have an elementary closed-form distance:
    sum (mu1-mu2)^2 + sum (sqrt(v1) - sqrt(v2))^2."""
    dim, n = 8, 2000
    mu1 = np.zeros(dim)
    mu2 = np.linspace(0.2, 1.0, dim)
    v1 = np.linspace(0.5, 2.0, dim)
    v2 = np.linspace(1.5, 0.7, dim)
    a = rng.standard_normal((n, dim)) * np.sqrt(v1) + mu1
    b = rng.standard_normal((n, dim)) * np.sqrt(v2) + mu2
    closed = float(((mu1 - mu2) ** 2).sum() + ((np.sqrt(v1) - np.sqrt(v2)) ** 2).sum())
    got = fid(a, b)
    assert abs(got - closed) <= 0.05 * closed


def test_fid_input_validation(rng):
    with pytest.raises(MetricsError):
        fid(rng.standard_normal((5, 3)), rng.standard_normal((5, 4)))
    with pytest.raises(MetricsError):
        fid(rng.standard_normal((1, 3)), rng.standard_normal((5, 3)))


def test_fid_nonnegative_on_hard_cases(rng):
    # near-singular covariances from tiny samples
    a = rng.standard_normal((3, 10))
    b = rng.standard_normal((3, 10))
    assert fid(a, b) >= 0.0


# -- SSIM -------------------------------------------------------------------------


def test_ssim_identity(rng):
    img = rng.uniform(-1, 1, size=(3, 24, 24))
    assert ssim(img, img) == pytest.approx(1.0)


def test_ssim_constant_images_match_direct_formula():
    # mu_x=0, mu_y=1, all variances zero, L=1:
    #   SSIM = C1/(mu_y^2 + C1) = 1e-4 / (1 + 1e-4)
    a = np.zeros((1, 16, 16))
    b = np.ones((1, 16, 16))
    expected = 1e-4 / (1.0 + 1e-4)
    assert ssim(a, b, data_range=1.0) == pytest.approx(expected, abs=1e-6)


def brute_force_ssim_channel(x, y, data_range):
    """Window-by-window SSIM with explicit loops."""
    size, sigma = 11, 1.5
    g = np.exp(-((np.arange(size) - 5.0) ** 2) / (2 * sigma**2))
    g /= g.sum()
    win = np.outer(g, g)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            wx = x[i : i + size, j : j + size]
            wy = y[i : i + size, j : j + size]
            mx, my = (win * wx).sum(), (win * wy).sum()
            vx = (win * wx * wx).sum() - mx * mx
            vy = (win * wy * wy).sum() - my * my
            cxy = (win * wx * wy).sum() - mx * my
            vals.append(
                ((2 * mx * my + c1) * (2 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
            )
    return float(np.mean(vals))


def test_ssim_matches_windowed_oracle(rng):
    x = rng.uniform(-1, 1, size=(16, 16))
    y = np.clip(x + rng.normal(0, 0.2, size=(16, 16)), -1, 1)
    got = ssim(x, y)
    want = brute_force_ssim_channel(x, y, 2.0)
    assert got == pytest.approx(want, abs=1e-6)


def test_ssim_shape_and_window_errors(rng):
    with pytest.raises(MetricsError):
        ssim(np.zeros((3, 16, 16)), np.zeros((3, 17, 17)))
    with pytest.raises(MetricsError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


# -- LPIPS ------------------------------------------------------------------------


def test_lpips_identity_and_symmetry(rng):
    a = rng.uniform(-1, 1, size=(3, 16, 16)).astype(np.float32)
    b = rng.uniform(-1, 1, size=(3, 16, 16)).astype(np.float32)
    assert lpips(a, a) == 0.0
    assert lpips(a, b) == pytest.approx(lpips(b, a), rel=1e-6)
    assert lpips(a, b) > 0.0


def _conv_direct(x, w, b, stride, pad):
    n_out = w.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (x.shape[1] + 2 * pad - w.shape[2]) // stride + 1
    wo = (x.shape[2] + 2 * pad - w.shape[3]) // stride + 1
    out = np.zeros((n_out, ho, wo))
    for o in range(n_out):
        for y in range(ho):
            for xx in range(wo):
                patch = xp[:, y * stride : y * stride + w.shape[2], xx * stride : xx * stride + w.shape[3]]
                out[o, y, xx] = (patch * w[o]).sum() + b[o]
    return out


def _gelu_np(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def test_lpips_matches_staged_recomputation(rng):
    """Layer-by-layer oracle: direct convs, gelu, unit-normalize, MSE, sum."""
    net = build_feature_net(seed=424242)
    a = rng.uniform(-1, 1, size=(3, 16, 16)).astype(np.float32)
    b = rng.uniform(-1, 1, size=(3, 16, 16)).astype(np.float32)

    def taps(img):
        h = img.astype(np.float64)
        out = []
        for w, bias in zip(net.weights, net.biases):
            h = _gelu_np(_conv_direct(h, w.data.astype(np.float64), bias.data.astype(np.float64), 2, 1))
            out.append(h)
        return out

    expected = 0.0
    for fa, fb in zip(taps(a), taps(b)):
        na = fa / np.sqrt((fa**2).sum(axis=0, keepdims=True) + 1e-10)
        nb = fb / np.sqrt((fb**2).sum(axis=0, keepdims=True) + 1e-10)
        expected += ((na - nb) ** 2).mean()
    got = lpips(a, b, net=net)
    assert got == pytest.approx(expected, rel=1e-4)


# -- aesthetic score -----------------------------------------------------------------


def test_aesthetic_deterministic(rng):
    img = rng.uniform(-1, 1, size=(3, 32, 32)).astype(np.float32)
    assert aesthetic_score(img) == aesthetic_score(img)


def test_zero_weight_head_scores_zero(rng):
    scorer = make_linear_scorer(np.zeros(FEATURE_DIM), bias=0.0)
    for _ in range(3):
        img = rng.uniform(-1, 1, size=(3, 32, 32)).astype(np.float32)
        assert aesthetic_score(img, scorer) == 0.0


def test_seeded_head_matches_dot_product(rng):
    w = rng.standard_normal(FEATURE_DIM)
    scorer = make_linear_scorer(w, bias=1.25)
    img = rng.uniform(-1, 1, size=(3, 32, 32)).astype(np.float32)
    feats = default_extractor()(img)
    assert aesthetic_score(img, scorer) == pytest.approx(float(w @ feats + 1.25), rel=1e-6)


# -- evaluate --------------------------------------------------------------------------


def _populate(dirpath, images):
    dirpath.mkdir(parents=True, exist_ok=True)
    for name, img in images.items():
        save_image(img, dirpath / f"{name}.png")


def test_evaluate_degenerate_copies(tmp_path, rng):
    imgs = {f"im{i}": rng.uniform(-1, 1, size=(3, 32, 32)) for i in range(4)}
    for sub in ("gen", "ref", "src"):
        _populate(tmp_path / sub, imgs)
    report = evaluate(tmp_path / "gen", tmp_path / "ref", tmp_path / "src", image_size=32)
    assert report.fid == pytest.approx(0.0, abs=1e-8)
    assert report.ssim_mean == pytest.approx(1.0)
    assert report.lpips_mean == pytest.approx(0.0, abs=1e-12)
    assert report.n_generated == report.n_reference == report.n_source == 4


def test_evaluate_composes_the_standalone_ops(tmp_path, rng):
    gen = {f"im{i}": rng.uniform(-1, 1, size=(3, 32, 32)) for i in range(3)}
    src = {f"im{i}": np.clip(v + rng.normal(0, 0.1, v.shape), -1, 1) for i, v in enumerate(gen.values())}
    src = {f"im{i}": v for i, v in enumerate(src.values())}
    ref = {f"r{i}": rng.uniform(-1, 1, size=(3, 32, 32)) for i in range(4)}
    _populate(tmp_path / "gen", gen)
    _populate(tmp_path / "src", src)
    _populate(tmp_path / "ref", ref)
    report = evaluate(tmp_path / "gen", tmp_path / "ref", tmp_path / "src", image_size=32)

    from styleloop.datasets import load_image

    gen_imgs = [load_image(tmp_path / "gen" / f"im{i}.png", 32) for i in range(3)]
    ref_imgs = [load_image(tmp_path / "ref" / f"r{i}.png", 32) for i in range(4)]
    src_imgs = [load_image(tmp_path / "src" / f"im{i}.png", 32) for i in range(3)]
    assert report.fid == pytest.approx(fid(extract_features(gen_imgs), extract_features(ref_imgs)))
    assert report.ssim_mean == pytest.approx(np.mean([ssim(g, s) for g, s in zip(gen_imgs, src_imgs)]))
    assert report.lpips_mean == pytest.approx(np.mean([lpips(g, s) for g, s in zip(gen_imgs, src_imgs)]))
    assert report.clip_ae_mean == pytest.approx(np.mean([aesthetic_score(g) for g in gen_imgs]))


def test_evaluate_rejects_unpairable_files(tmp_path, rng):
    _populate(tmp_path / "gen", {"a": rng.uniform(-1, 1, size=(3, 32, 32))})
    _populate(tmp_path / "ref", {"r0": rng.uniform(-1, 1, size=(3, 32, 32)), "r1": rng.uniform(-1, 1, size=(3, 32, 32))})
    _populate(tmp_path / "src", {"b": rng.uniform(-1, 1, size=(3, 32, 32))})
    with pytest.raises(MetricsError, match="a.png"):
        evaluate(tmp_path / "gen", tmp_path / "ref", tmp_path / "src", image_size=32)


def test_evaluate_writes_table_schema_report(tmp_path, rng):
    imgs = {f"im{i}": rng.uniform(-1, 1, size=(3, 32, 32)) for i in range(3)}
    for sub in ("gen", "ref", "src"):
        _populate(tmp_path / sub, imgs)
    out = tmp_path / "report"
    evaluate(tmp_path / "gen", tmp_path / "ref", tmp_path / "src", image_size=32, out_prefix=out)
    with open(f"{out}.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and set(rows[0]) >= {"FID", "SSIM", "LPIPS", "CLIP-ae"}
    payload = json.loads((tmp_path / "report.json").read_text())
    assert set(payload) >= {"FID", "SSIM", "LPIPS", "CLIP-ae", "n_generated"}
