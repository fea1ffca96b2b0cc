"""Smoke tests for the backend benchmark so it cannot rot silently."""

from __future__ import annotations

import numpy as np

from styleloop import bench, kernels


def test_bench_kernels_runs_on_a_tiny_shape(monkeypatch):
    monkeypatch.setattr(bench, "SHAPES", [("tiny", 1, 3, 8, 4, 3, 1)])
    rows = bench.bench_kernels()
    assert len(rows) == 1
    row = rows[0]
    assert row["numpy_fwd"] > 0
    if kernels.HAS_NUMBA:
        assert row["numba_fwd"] > 0
    kernels.set_backend(kernels._initial_backend())


def test_bench_translate_runs():
    row = bench.bench_translate(image_size=32)
    assert row["numpy_fwd"] > 0
    assert np.isfinite(row["numpy_fwd"])
    kernels.set_backend(kernels._initial_backend())
