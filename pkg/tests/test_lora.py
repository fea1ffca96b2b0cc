from __future__ import annotations

import numpy as np
import pytest

from styleloop.autodiff import Tensor
from styleloop.lora import (
    AdapterSet,
    LoRAAdapter,
    apply_adapted,
    init_adapter,
    merge,
    parameter_count,
    trainable_parameters,
)


def test_fresh_adapter_is_exact_noop(rng):
    ad = init_adapter(6, 4, rank=2, alpha=8.0, seed=0)
    w = rng.standard_normal((4, 6))
    for _ in range(5):
        x = rng.standard_normal(6)
        np.testing.assert_array_equal(apply_adapted(w, ad, x), w @ x)


def test_same_seed_bit_identical():
    a = init_adapter(16, 8, rank=3, alpha=1.0, seed=77)
    b = init_adapter(16, 8, rank=3, alpha=1.0, seed=77)
    assert a.A.data.tobytes() == b.A.data.tobytes()
    assert np.all(b.B.data == 0.0)


def test_rank_too_large_rejected():
    with pytest.raises(ValueError, match="rank"):
        init_adapter(4, 4, rank=5, alpha=1.0, seed=0)
    with pytest.raises(ValueError, match="rank"):
        init_adapter(4, 4, rank=0, alpha=1.0, seed=0)


def _hand_adapter(alpha):
    # A = [[1, 0]], B = [[0], [1]]  ->  delta = alpha/1 * [[0,0],[1,0]]
    return LoRAAdapter(
        A=Tensor(np.array([[1.0, 0.0]])),
        B=Tensor(np.array([[0.0], [1.0]])),
        rank=1,
        alpha=alpha,
        target_layer_id="hand",
    )


def test_apply_adapted_hand_case():
    w = np.eye(2)
    y = apply_adapted(w, _hand_adapter(alpha=1.0), np.array([1.0, 2.0]))
    np.testing.assert_allclose(y, [1.0, 3.0])
    y2 = apply_adapted(w, _hand_adapter(alpha=2.0), np.array([1.0, 2.0]))
    np.testing.assert_allclose(y2, [1.0, 4.0])


def test_merge_hand_case_and_noop():
    w = np.eye(2)
    np.testing.assert_allclose(merge(w, _hand_adapter(1.0)), [[1.0, 0.0], [1.0, 1.0]])
    fresh = init_adapter(2, 2, rank=1, alpha=3.0, seed=5)
    np.testing.assert_array_equal(merge(w, fresh), w)


def test_merge_apply_equivalence_on_random_vectors(rng):
    ad = init_adapter(12, 9, rank=4, alpha=2.5, seed=3)
    ad.B.data = rng.standard_normal(ad.B.shape).astype(np.float32)
    w = rng.standard_normal((9, 12)).astype(np.float32)
    merged = merge(w, ad)
    for _ in range(100):
        x = rng.standard_normal(12).astype(np.float32)
        y_apply = apply_adapted(w, ad, x)
        y_merge = merged @ x
        assert np.all(np.abs(y_merge - y_apply) <= 1e-6 * (1.0 + np.abs(y_apply)))


def test_alpha_linearity(rng):
    base = init_adapter(10, 7, rank=2, alpha=1.0, seed=9)
    base.B.data = rng.standard_normal(base.B.shape)
    x = rng.standard_normal(10)
    w = np.zeros((7, 10))
    delta1 = apply_adapted(w, base, x)
    base.alpha = 4.0
    delta4 = apply_adapted(w, base, x)
    np.testing.assert_allclose(delta4, 4.0 * delta1, rtol=1e-12)


def test_shape_mismatches_rejected(rng):
    ad = init_adapter(6, 4, rank=2, alpha=1.0, seed=0)
    with pytest.raises(ValueError):
        apply_adapted(np.zeros((4, 5)), ad, np.zeros(5))
    with pytest.raises(ValueError):
        merge(np.zeros((5, 6)), ad)


def test_parameter_counts():
    s = AdapterSet()
    assert parameter_count(s) == 0 and list(trainable_parameters(s)) == []
    s.adapters["a"] = init_adapter(8, 8, rank=2, alpha=1.0, seed=1)
    assert parameter_count(s) == 2 * (8 + 8) == 32
    s.adapters["b"] = init_adapter(4, 10, rank=3, alpha=1.0, seed=2)
    assert parameter_count(s) == 32 + 3 * (4 + 10)
    names = [n for n, _ in trainable_parameters(s)]
    assert names == ["a.lora_A", "a.lora_B", "b.lora_A", "b.lora_B"]


def test_trainable_parameters_yield_only_adapter_tensors():
    s = AdapterSet()
    s.adapters["layer"] = init_adapter(8, 8, rank=2, alpha=1.0, seed=1)
    tensors = [t for _, t in trainable_parameters(s)]
    assert sum(t.data.size for t in tensors) == parameter_count(s)
