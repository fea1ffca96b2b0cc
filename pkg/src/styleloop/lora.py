"""Low-rank adaptation deltas for frozen linear maps.

An adapter holds two small matrices A [r, d_in] and B [d_out, r]; the
effective weight is W + (alpha/r) * B @ A. B starts at zero, so a freshly
attached adapter is an exact no-op, and only A/B are ever trainable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import Tensor, matmul, mul, reshape, transpose

INIT_STD = 0.02


@dataclass
class LoRAAdapter:
    A: Tensor
    B: Tensor
    rank: int
    alpha: float
    target_layer_id: str

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def param_count(self) -> int:
        return self.rank * (self.d_in + self.d_out)


@dataclass
class AdapterSet:
    adapters: dict[str, LoRAAdapter] = field(default_factory=dict)
    domain_tag: str = "source"  # source | target | generator

    def __len__(self) -> int:
        return len(self.adapters)

    def get(self, layer_id: str) -> LoRAAdapter | None:
        return self.adapters.get(layer_id)

    def set_trainable(self, flag: bool) -> None:
        for ad in self.adapters.values():
            ad.A.requires_grad = flag
            ad.B.requires_grad = flag


def init_adapter(
    d_in: int,
    d_out: int,
    rank: int,
    alpha: float,
    seed: int,
    target_layer_id: str = "",
) -> LoRAAdapter:
    """A from a seeded Gaussian (std 0.02), B all zeros -> zero delta."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank > min(d_in, d_out):
        raise ValueError(f"rank {rank} exceeds min(d_in={d_in}, d_out={d_out})")
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, INIT_STD, size=(rank, d_in)).astype(np.float32)
    b = np.zeros((d_out, rank), dtype=np.float32)
    return LoRAAdapter(Tensor(a), Tensor(b), rank, float(alpha), target_layer_id)


def apply_adapted(W: np.ndarray, adapter: LoRAAdapter, x: np.ndarray) -> np.ndarray:
    """y = W @ x + (alpha/rank) * B @ (A @ x); pure ndarray math."""
    W = np.asarray(W)
    x = np.asarray(x)
    if W.shape[1] != x.shape[0]:
        raise ValueError(f"shape mismatch: W {W.shape} @ x {x.shape}")
    if adapter.d_in != W.shape[1] or adapter.d_out != W.shape[0]:
        raise ValueError(
            f"adapter dims ({adapter.d_out}x{adapter.d_in}) do not match W {W.shape}"
        )
    return W @ x + adapter.scale * (adapter.B.data @ (adapter.A.data @ x))


def merge(W: np.ndarray, adapter: LoRAAdapter) -> np.ndarray:
    """W' = W + (alpha/rank) * B @ A; inference-time fusion."""
    W = np.asarray(W)
    if adapter.d_in != W.shape[1] or adapter.d_out != W.shape[0]:
        raise ValueError(
            f"adapter dims ({adapter.d_out}x{adapter.d_in}) do not match W {W.shape}"
        )
    return W + adapter.scale * (adapter.B.data @ adapter.A.data)


def trainable_parameters(adapter_set: AdapterSet) -> Iterator[tuple[str, Tensor]]:
    """Every A and B entry, nothing from base weights."""
    for layer_id in sorted(adapter_set.adapters):
        ad = adapter_set.adapters[layer_id]
        yield f"{layer_id}.lora_A", ad.A
        yield f"{layer_id}.lora_B", ad.B


def parameter_count(adapter_set: AdapterSet) -> int:
    return sum(ad.param_count() for ad in adapter_set.adapters.values())


# -- graph-building helpers used inside the models --------------------------


def delta_apply(x: Tensor, adapter: LoRAAdapter) -> Tensor:
    """Autodiff two-path form for row-vector batches: (x A^T) B^T * scale."""
    low = matmul(x, transpose(adapter.A, (1, 0)))
    up = matmul(low, transpose(adapter.B, (1, 0)))
    return mul(up, adapter.scale)


def merged_weight(W: Tensor, adapter: LoRAAdapter) -> Tensor:
    """W + scale * reshape(B @ A); used where W is a conv kernel."""
    delta = mul(matmul(adapter.B, adapter.A), adapter.scale)
    return W + reshape(delta, W.shape)


def adapters_state(adapter_set: AdapterSet) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for layer_id, ad in adapter_set.adapters.items():
        out[f"{layer_id}.A"] = ad.A.data
        out[f"{layer_id}.B"] = ad.B.data
    return out


def adapters_index(adapter_set: AdapterSet) -> list[dict]:
    return [
        {
            "layer_id": layer_id,
            "d_in": ad.d_in,
            "d_out": ad.d_out,
            "rank": ad.rank,
            "alpha": ad.alpha,
        }
        for layer_id, ad in sorted(adapter_set.adapters.items())
    ]


def load_adapters_state(adapter_set: AdapterSet, state: dict[str, np.ndarray]) -> None:
    for layer_id, ad in adapter_set.adapters.items():
        ad.A.data = np.asarray(state[f"{layer_id}.A"], dtype=ad.A.dtype)
        ad.B.data = np.asarray(state[f"{layer_id}.B"], dtype=ad.B.dtype)
