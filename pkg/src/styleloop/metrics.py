"""Evaluation suite: FID, SSIM, LPIPS-style perceptual distance, aesthetic
score, and the combined directory-level report.

Feature sources are pluggable. The built-ins are small seed-initialized
conv nets, so every number here is deterministic and CPU-cheap; swapping
in a real Inception/CLIP extractor changes the magnitudes but not the
formulas, which are what this module pins down.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import list_images, load_image

PERCEPTUAL_SEED = 950101  # shared by the training-time perceptual loss
EXTRACTOR_SEED = 950202
AESTHETIC_SEED = 950303
FEATURE_DIM = 64


class MetricsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# toy feature nets
# ---------------------------------------------------------------------------


@dataclass
class FeatureNet:
    """Three stride-2 convs (3 -> 16 -> 32 -> 64) with GELU taps."""

    weights: list[Tensor]
    biases: list[Tensor]
    seed: int


def build_feature_net(seed: int, dtype=np.float32) -> FeatureNet:
    rng = np.random.default_rng([seed, 303])
    channels = [(3, 16), (16, 32), (32, FEATURE_DIM)]
    ws, bs = [], []
    for c_in, c_out in channels:
        std = 1.0 / np.sqrt(c_in * 9)
        ws.append(Tensor(rng.normal(0.0, std, size=(c_out, c_in, 3, 3)).astype(dtype)))
        bs.append(Tensor(np.zeros(c_out, dtype=dtype)))
    return FeatureNet(ws, bs, seed)


def feature_maps_graph(net: FeatureNet, x: Tensor) -> list[Tensor]:
    """Activations after each conv+GELU; x is [N, 3, H, W]."""
    taps = []
    h = x
    for w, b in zip(net.weights, net.biases):
        h = ad.conv2d(h, w, stride=2, pad=1) + ad.reshape(b, (1, -1, 1, 1))
        h = ad.gelu(h)
        taps.append(h)
    return taps


def perceptual_distance_graph(net: FeatureNet, a: Tensor, b: Tensor) -> Tensor:
    """Sum over layers of the mean squared distance between channel-unit-
    normalized feature maps. Zero iff the inputs are identical; symmetric."""
    taps_a = feature_maps_graph(net, a)
    taps_b = feature_maps_graph(net, b)
    total = None
    for fa, fb in zip(taps_a, taps_b):
        na = _unit_channels(fa)
        nb = _unit_channels(fb)
        diff = na - nb
        d = ad.mean(ad.mul(diff, diff))
        total = d if total is None else total + d
    return total


def _unit_channels(f: Tensor) -> Tensor:
    norm = ad.sqrt(ad.sum_(ad.mul(f, f), axis=1, keepdims=True) + 1e-10)
    return ad.mul(f, ad.powc(norm, -1.0))


_default_perceptual: FeatureNet | None = None


def default_perceptual_net() -> FeatureNet:
    global _default_perceptual
    if _default_perceptual is None:
        _default_perceptual = build_feature_net(PERCEPTUAL_SEED)
    return _default_perceptual


def lpips(a: np.ndarray, b: np.ndarray, net: FeatureNet | None = None) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch: {a.shape} vs {b.shape}")
    net = net or default_perceptual_net()
    dtype = net.weights[0].dtype
    with ad.no_grad():
        d = perceptual_distance_graph(
            net, Tensor(a[None].astype(dtype)), Tensor(b[None].astype(dtype))
        )
    return float(d.data)


# ---------------------------------------------------------------------------
# feature extraction and FID
# ---------------------------------------------------------------------------


class ToyExtractor:
    """Seeded conv net + global average pool -> FEATURE_DIM vector."""

    def __init__(self, seed: int = EXTRACTOR_SEED):
        self.net = build_feature_net(seed)

    def __call__(self, img: np.ndarray) -> np.ndarray:
        x = Tensor(np.asarray(img, dtype=np.float32)[None])
        with ad.no_grad():
            taps = feature_maps_graph(self.net, x)
        return taps[-1].data[0].mean(axis=(1, 2))


_default_extractor: ToyExtractor | None = None


def default_extractor() -> ToyExtractor:
    global _default_extractor
    if _default_extractor is None:
        _default_extractor = ToyExtractor()
    return _default_extractor


def extract_features(
    images: Sequence[np.ndarray], extractor: Callable[[np.ndarray], np.ndarray] | None = None
) -> np.ndarray:
    """One feature row per image."""
    if len(images) == 0:
        raise MetricsError("extract_features needs at least one image")
    extractor = extractor or default_extractor()
    return np.stack([np.asarray(extractor(img), dtype=np.float64) for img in images])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: np.ndarray, b: np.ndarray) -> float:
    """Frechet distance between the Gaussian moment fits of two feature sets:
    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The matrix square root uses the symmetric form
    sqrt(S1)^(1/2)-sandwich with eigen-clamping, which is robust for the
    near-singular covariances of small samples.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricsError(f"feature matrices must share columns: {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise MetricsError("FID needs at least 2 rows per matrix")
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    s1 = np.atleast_2d(np.cov(a, rowvar=False))
    s2 = np.atleast_2d(np.cov(b, rowvar=False))
    s1h = _psd_sqrt(s1)
    cross = _psd_sqrt(s1h @ s2 @ s1h)
    diff = mu1 - mu2
    val = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    if val < -1e-6:
        raise MetricsError(f"FID numerically broken: {val}")
    return max(val, 0.0)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    """Structural similarity with the standard 11x11 Gaussian window
    (sigma 1.5), C1=(0.01 L)^2, C2=(0.03 L)^2, averaged over valid windows
    and channels. L defaults to 2.0 for [-1, 1] images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[1] < 11 or a.shape[2] < 11:
        raise MetricsError("image smaller than the 11x11 SSIM window")
    win = _gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        wx = sliding_window_view(x, (11, 11))
        wy = sliding_window_view(y, (11, 11))
        mx = np.tensordot(wx, win, axes=([2, 3], [0, 1]))
        my = np.tensordot(wy, win, axes=([2, 3], [0, 1]))
        mxx = np.tensordot(wx * wx, win, axes=([2, 3], [0, 1]))
        myy = np.tensordot(wy * wy, win, axes=([2, 3], [0, 1]))
        mxy = np.tensordot(wx * wy, win, axes=([2, 3], [0, 1]))
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(num / den)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# aesthetic score
# ---------------------------------------------------------------------------


def make_linear_scorer(
    weights: np.ndarray, bias: float = 0.0, extractor=None
) -> Callable[[np.ndarray], float]:
    extractor = extractor or default_extractor()
    w = np.asarray(weights, dtype=np.float64)

    def scorer(img: np.ndarray) -> float:
        return float(w @ extractor(img) + bias)

    return scorer


def default_aesthetic_scorer() -> Callable[[np.ndarray], float]:
    rng = np.random.default_rng([AESTHETIC_SEED, 404])
    w = rng.normal(0.0, FEATURE_DIM**-0.5, size=FEATURE_DIM)
    return make_linear_scorer(w, bias=5.0)


def aesthetic_score(img: np.ndarray, scorer: Callable[[np.ndarray], float] | None = None) -> float:
    scorer = scorer or default_aesthetic_scorer()
    return float(scorer(img))


# ---------------------------------------------------------------------------
# directory-level report
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    fid: float
    ssim_mean: float
    lpips_mean: float
    clip_ae_mean: float
    n_generated: int
    n_reference: int
    n_source: int

    def to_dict(self) -> dict:
        return {
            "FID": self.fid,
            "SSIM": self.ssim_mean,
            "LPIPS": self.lpips_mean,
            "CLIP-ae": self.clip_ae_mean,
            "n_generated": self.n_generated,
            "n_reference": self.n_reference,
            "n_source": self.n_source,
        }


def evaluate(
    generated_dir: str | Path,
    reference_dir: str | Path,
    source_dir: str | Path,
    image_size: int = 256,
    extractor=None,
    scorer=None,
    out_prefix: str | Path | None = None,
) -> MetricsReport:
    """FID(generated, reference); SSIM/LPIPS over filename-paired
    (generated, source); aesthetic score over generated. Optionally writes
    <out_prefix>.csv and <out_prefix>.json."""
    gen_files = list_images(generated_dir)
    ref_files = list_images(reference_dir)
    src_files = list_images(source_dir)
    if not gen_files or not ref_files or not src_files:
        raise MetricsError("all three directories must contain images")
    src_by_stem = {p.stem: p for p in src_files}
    unpaired = [p.name for p in gen_files if p.stem not in src_by_stem]
    if unpaired:
        raise MetricsError(f"generated images without a source match: {unpaired}")

    gen_imgs = [load_image(p, image_size) for p in gen_files]
    ref_imgs = [load_image(p, image_size) for p in ref_files]
    fid_val = fid(
        extract_features(gen_imgs, extractor), extract_features(ref_imgs, extractor)
    )
    ssims, lpipss = [], []
    for p, img in zip(gen_files, gen_imgs):
        src_img = load_image(src_by_stem[p.stem], image_size)
        ssims.append(ssim(img, src_img))
        lpipss.append(lpips(img, src_img))
    the_scorer = scorer or default_aesthetic_scorer()
    aes = [aesthetic_score(img, the_scorer) for img in gen_imgs]

    report = MetricsReport(
        fid=fid_val,
        ssim_mean=float(np.mean(ssims)),
        lpips_mean=float(np.mean(lpipss)),
        clip_ae_mean=float(np.mean(aes)),
        n_generated=len(gen_files),
        n_reference=len(ref_files),
        n_source=len(src_files),
    )
    if out_prefix is not None:
        write_report(report, out_prefix)
    return report


def write_report(report: MetricsReport, out_prefix: str | Path) -> None:
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    with open(f"{out_prefix}.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(d.keys()))
        writer.writeheader()
        writer.writerow(d)
    Path(f"{out_prefix}.json").write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")
