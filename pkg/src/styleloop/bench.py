"""Benchmark the numba and numpy convolution backends.

Run with ``python -m styleloop.bench``. Times the three conv kernels on
training-representative shapes plus one full translate pass, on both
backends, and prints a comparison table. The numba timings exclude the
first (compilation) call.
"""

from __future__ import annotations

import time

import numpy as np

from . import kernels
from .autodiff import Tensor
from .config import ExperimentConfig
from .generator import translate_graph
from .text_encoder import encoder_forward, tokenize
from .training import build_models

SHAPES = [
    # (label, N, C_in, H, C_out, k, stride)
    ("vae_enc1 64px", 2, 3, 64, 32, 3, 2),
    ("vae_enc2", 2, 32, 32, 64, 3, 2),
    ("vae_enc3", 2, 64, 16, 128, 3, 2),
    ("vae_dec1 256px", 2, 128, 64, 64, 3, 1),
]


def _time(fn, repeats: int = 5) -> float:
    fn()  # warm-up / JIT
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels() -> list[dict]:
    rows = []
    for label, n, c_in, h, c_out, k, stride in SHAPES:
        rng = np.random.default_rng(0)
        x = rng.standard_normal((n, c_in, h, h)).astype(np.float32)
        w = rng.standard_normal((c_out, c_in, k, k)).astype(np.float32)
        gout_shape = (n, c_out, kernels.conv_out_size(h, k, stride, 1), kernels.conv_out_size(h, k, stride, 1))
        gout = rng.standard_normal(gout_shape).astype(np.float32)
        row = {"kernel": label}
        for backend in ("numpy",) + (("numba",) if kernels.HAS_NUMBA else ()):
            kernels.set_backend(backend)
            row[f"{backend}_fwd"] = _time(lambda: kernels.conv2d_forward(x, w, stride, 1))
            row[f"{backend}_gw"] = _time(lambda: kernels.conv2d_grad_weight(gout, x, k, k, stride, 1))
            row[f"{backend}_gx"] = _time(lambda: kernels.conv2d_grad_input(gout, w, h, h, stride, 1))
        rows.append(row)
    return rows


def bench_translate(image_size: int = 64) -> dict:
    cfg = ExperimentConfig()
    cfg.image_size = image_size
    models = build_models(cfg)
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(-1, 1, size=(2, 3, image_size, image_size)).astype(np.float32))
    tokens = tokenize(cfg.prompts.target_prompt, cfg.max_tokens)
    from . import autodiff as ad

    with ad.no_grad():
        cond = encoder_forward(models.encoders, tokens)
    row = {"kernel": f"translate {image_size}px"}
    for backend in ("numpy",) + (("numba",) if kernels.HAS_NUMBA else ()):
        kernels.set_backend(backend)

        def run():
            with ad.no_grad():
                translate_graph(models.generator, x, cond, tokens.attention_mask)

        row[f"{backend}_fwd"] = _time(run, repeats=3)
    return row


def main() -> None:
    print(f"numba available: {kernels.HAS_NUMBA}; default backend: {kernels.get_backend()}")
    rows = bench_kernels()
    rows.append(bench_translate())
    cols = ["kernel", "numpy_fwd", "numba_fwd", "numpy_gw", "numba_gw", "numpy_gx", "numba_gx"]
    header = f"{cols[0]:<18}" + "".join(f"{c:>12}" for c in cols[1:])
    print(header)
    for row in rows:
        line = f"{row['kernel']:<18}"
        for c in cols[1:]:
            v = row.get(c)
            line += f"{v*1e3:>10.2f}ms" if v is not None else f"{'-':>12}"
        print(line)
    kernels.set_backend(kernels._initial_backend())


if __name__ == "__main__":
    main()
