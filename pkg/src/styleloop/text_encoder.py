"""Byte-level tokenizer, the frozen base text encoder, and its two
domain-specialized variants.

The encoder is a deliberately small pre-norm transformer: token embedding
(vocab 259 = 256 bytes + BOS/EOS/PAD) + learned positional embedding, two
blocks of 4-head self-attention and a 4x feed-forward, final layer norm,
d_model = d_cond = 64. Domain variants apply low-rank adapters at every
attention projection and feed-forward linear; with zero-initialized
adapters they reproduce the base encoder exactly.

Also hosts the semantic-separation measurement (cosine / silhouette over
pooled prompt embeddings) and the contrastive separation loss that pushes
the two domains into distinct clusters.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lora import AdapterSet, delta_apply, init_adapter

VOCAB_SIZE = 259
BOS_ID = 256
EOS_ID = 257
PAD_ID = 258

D_MODEL = 64
D_COND = 64
N_HEADS = 4
N_BLOCKS = 2
FFN_MULT = 4

# layer ids (relative to the encoder) that receive adapters
ADAPTED_LINEARS = ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.fc1", "ffn.fc2"]


@dataclass
class TokenSequence:
    ids: np.ndarray  # int64 [max_tokens]
    attention_mask: np.ndarray  # float [max_tokens], 1.0 through EOS


@dataclass
class ConditioningEmbedding:
    values: np.ndarray  # [max_tokens, d_cond]
    attention_mask: np.ndarray
    domain_tag: str  # base | source | target


@dataclass
class TextEncoderWeights:
    base: dict[str, Tensor]
    source_adapters: AdapterSet
    target_adapters: AdapterSet
    max_tokens: int


def tokenize(prompt: str, max_tokens: int = 77) -> TokenSequence:
    """Deterministic byte-level tokenization: BOS + utf-8 bytes + EOS, padded.

    Long prompts are truncated to max_tokens - 1 symbols before EOS is
    appended, so every sequence contains an EOS.
    """
    raw = list(prompt.encode("utf-8"))
    ids = [BOS_ID] + raw
    ids = ids[: max_tokens - 1]
    ids.append(EOS_ID)
    n = len(ids)
    ids = ids + [PAD_ID] * (max_tokens - n)
    mask = [1.0] * n + [0.0] * (max_tokens - n)
    return TokenSequence(np.array(ids, dtype=np.int64), np.array(mask, dtype=np.float64))


def _layer_seed(seed: int, name: str) -> int:
    return (int(seed) * 2654435761 + zlib.crc32(name.encode())) % (2**31 - 1)


def _gauss(rng: np.random.Generator, shape: tuple, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype))


def build_text_encoder(
    seed: int,
    lora_rank: int = 4,
    lora_alpha: float = 4.0,
    max_tokens: int = 77,
    dtype=np.float32,
) -> TextEncoderWeights:
    rng = np.random.default_rng([seed, 101])
    p: dict[str, Tensor] = {}
    p["tok_embed"] = _gauss(rng, (VOCAB_SIZE, D_MODEL), 0.02, dtype)
    p["pos_embed"] = _gauss(rng, (max_tokens, D_MODEL), 0.02, dtype)
    for i in range(N_BLOCKS):
        b = f"blocks.{i}"
        for ln in ("ln1", "ln2"):
            p[f"{b}.{ln}.g"] = Tensor(np.ones(D_MODEL, dtype=dtype))
            p[f"{b}.{ln}.b"] = Tensor(np.zeros(D_MODEL, dtype=dtype))
        for proj in ("q", "k", "v", "o"):
            p[f"{b}.attn.{proj}.weight"] = _gauss(rng, (D_MODEL, D_MODEL), D_MODEL**-0.5, dtype)
            p[f"{b}.attn.{proj}.bias"] = Tensor(np.zeros(D_MODEL, dtype=dtype))
        d_ff = FFN_MULT * D_MODEL
        p[f"{b}.ffn.fc1.weight"] = _gauss(rng, (d_ff, D_MODEL), D_MODEL**-0.5, dtype)
        p[f"{b}.ffn.fc1.bias"] = Tensor(np.zeros(d_ff, dtype=dtype))
        p[f"{b}.ffn.fc2.weight"] = _gauss(rng, (D_MODEL, d_ff), d_ff**-0.5, dtype)
        p[f"{b}.ffn.fc2.bias"] = Tensor(np.zeros(D_MODEL, dtype=dtype))
    p["final_ln.g"] = Tensor(np.ones(D_MODEL, dtype=dtype))
    p["final_ln.b"] = Tensor(np.zeros(D_MODEL, dtype=dtype))

    def make_set(domain: str, code: int) -> AdapterSet:
        aset = AdapterSet(domain_tag=domain)
        for i in range(N_BLOCKS):
            for rel in ADAPTED_LINEARS:
                layer_id = f"blocks.{i}.{rel}"
                w = p[f"{layer_id}.weight"]
                aset.adapters[layer_id] = init_adapter(
                    d_in=w.shape[1],
                    d_out=w.shape[0],
                    rank=lora_rank,
                    alpha=lora_alpha,
                    seed=_layer_seed(seed + code, layer_id),
                    target_layer_id=layer_id,
                )
                if dtype is not np.float32:
                    ada = aset.adapters[layer_id]
                    ada.A.data = ada.A.data.astype(dtype)
                    ada.B.data = ada.B.data.astype(dtype)
        return aset

    return TextEncoderWeights(
        base=p,
        source_adapters=make_set("source", 7001),
        target_adapters=make_set("target", 7002),
        max_tokens=max_tokens,
    )


def _adapted_linear(x: Tensor, p: dict[str, Tensor], layer_id: str, adapters: AdapterSet | None) -> Tensor:
    y = ad.linear(x, p[f"{layer_id}.weight"], p[f"{layer_id}.bias"])
    adapter = adapters.get(layer_id) if adapters is not None else None
    if adapter is not None:
        y = y + delta_apply(x, adapter)
    return y


def encoder_forward(
    weights: TextEncoderWeights,
    tokens: TokenSequence,
    adapters: AdapterSet | None = None,
) -> Tensor:
    """Graph-building forward pass; returns [max_tokens, d_cond]."""
    p = weights.base
    dtype = p["tok_embed"].dtype
    x = ad.embedding(p["tok_embed"], tokens.ids) + p["pos_embed"]
    # additive key mask: padded positions get a large negative score
    mask = tokens.attention_mask.astype(dtype)
    key_bias = ((mask - 1.0) * 1e9).reshape(1, 1, -1)
    t = weights.max_tokens
    dh = D_MODEL // N_HEADS
    for i in range(N_BLOCKS):
        b = f"blocks.{i}"
        h = ad.layer_norm(x, p[f"{b}.ln1.g"], p[f"{b}.ln1.b"])
        q = _adapted_linear(h, p, f"{b}.attn.q", adapters)
        k = _adapted_linear(h, p, f"{b}.attn.k", adapters)
        v = _adapted_linear(h, p, f"{b}.attn.v", adapters)
        q = ad.transpose(ad.reshape(q, (t, N_HEADS, dh)), (1, 0, 2))
        k = ad.transpose(ad.reshape(k, (t, N_HEADS, dh)), (1, 0, 2))
        v = ad.transpose(ad.reshape(v, (t, N_HEADS, dh)), (1, 0, 2))
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (dh**-0.5)
        attn = ad.softmax(scores + key_bias, axis=-1)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (t, D_MODEL))
        x = x + _adapted_linear(ctx, p, f"{b}.attn.o", adapters)
        h2 = ad.layer_norm(x, p[f"{b}.ln2.g"], p[f"{b}.ln2.b"])
        f = _adapted_linear(h2, p, f"{b}.ffn.fc1", adapters)
        f = _adapted_linear(ad.gelu(f), p, f"{b}.ffn.fc2", adapters)
        x = x + f
    return ad.layer_norm(x, p["final_ln.g"], p["final_ln.b"])


def encode_base(tokens: TokenSequence, weights: TextEncoderWeights) -> ConditioningEmbedding:
    with ad.no_grad():
        out = encoder_forward(weights, tokens, adapters=None)
    return ConditioningEmbedding(out.data, tokens.attention_mask.copy(), "base")


def encode_domain(
    tokens: TokenSequence, domain: str, weights: TextEncoderWeights
) -> ConditioningEmbedding:
    aset = _domain_set(weights, domain)
    with ad.no_grad():
        out = encoder_forward(weights, tokens, adapters=aset)
    return ConditioningEmbedding(out.data, tokens.attention_mask.copy(), domain)


def _domain_set(weights: TextEncoderWeights, domain: str) -> AdapterSet:
    if domain == "source":
        return weights.source_adapters
    if domain == "target":
        return weights.target_adapters
    raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")


# ---------------------------------------------------------------------------
# pooling and separation
# ---------------------------------------------------------------------------


def pool_embedding(emb: ConditioningEmbedding) -> np.ndarray:
    """Mean over unpadded token positions."""
    m = emb.attention_mask.astype(emb.values.dtype)
    return (emb.values * m[:, None]).sum(axis=0) / m.sum()


def pool_tokens(x: Tensor, attention_mask: np.ndarray) -> Tensor:
    m = attention_mask.astype(x.dtype).reshape(-1, 1)
    total = float(attention_mask.sum())
    return ad.mul(ad.sum_(ad.mul(x, m), axis=0), 1.0 / total)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


@dataclass
class SeparationReport:
    mean_within_source: float
    mean_within_target: float
    mean_between: float
    silhouette: float

    def to_dict(self) -> dict:
        return {
            "mean_within_source": self.mean_within_source,
            "mean_within_target": self.mean_within_target,
            "mean_between": self.mean_between,
            "silhouette": self.silhouette,
        }


def _mean_offdiag(sim: np.ndarray) -> float:
    n = sim.shape[0]
    if n < 2:
        return 1.0
    return float((sim.sum() - np.trace(sim)) / (n * (n - 1)))


def embedding_separation(
    source_embs: list[ConditioningEmbedding],
    target_embs: list[ConditioningEmbedding],
) -> SeparationReport:
    """Cosine statistics and a two-cluster silhouette over pooled embeddings.

    Silhouette uses cosine distance (1 - cos); points in singleton clusters
    contribute 0, and so does any point whose a and b are both 0.
    """
    if not source_embs or not target_embs:
        raise ValueError("both embedding lists must be non-empty")
    zs = _unit_rows(np.stack([pool_embedding(e) for e in source_embs]))
    zt = _unit_rows(np.stack([pool_embedding(e) for e in target_embs]))
    ss = zs @ zs.T
    tt = zt @ zt.T
    st = zs @ zt.T
    report = SeparationReport(
        mean_within_source=_mean_offdiag(ss),
        mean_within_target=_mean_offdiag(tt),
        mean_between=float(st.mean()),
        silhouette=_silhouette(1.0 - ss, 1.0 - tt, 1.0 - st),
    )
    return report


def _silhouette(dss: np.ndarray, dtt: np.ndarray, dst: np.ndarray) -> float:
    # cosine distances of near-identical vectors are float noise around 0;
    # clamping keeps degenerate clusters at silhouette 0 instead of noise ratios
    dss, dtt, dst = (np.where(d < 1e-6, 0.0, d) for d in (dss, dtt, dst))
    ns, nt = dss.shape[0], dtt.shape[0]
    scores = []
    for i in range(ns):
        a = (dss[i].sum() - dss[i, i]) / (ns - 1) if ns > 1 else None
        b = dst[i].mean()
        scores.append(_sil_point(a, b))
    for j in range(nt):
        a = (dtt[j].sum() - dtt[j, j]) / (nt - 1) if nt > 1 else None
        b = dst[:, j].mean()
        scores.append(_sil_point(a, b))
    return float(np.mean(scores))


def _sil_point(a: float | None, b: float) -> float:
    if a is None:  # singleton cluster
        return 0.0
    m = max(a, b)
    if m <= 0.0:
        return 0.0
    return (b - a) / m


def separation_loss_graph(pooled_s: Tensor, pooled_t: Tensor, temperature: float) -> Tensor:
    """Symmetric contrastive loss over pooled prompt embeddings.

    For every anchor, same-domain embeddings (itself included) are the
    positives and cross-domain ones the negatives:

        L = -mean_i log( sum_{j in domain(i)} exp(cos(z_i, z_j)/tau)
                         / sum_{all j} exp(cos(z_i, z_j)/tau) )

    Always >= 0; approaches 0 as the two domains tighten into well
    separated clusters. Differentiable through the encoders.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")

    def unit(z: Tensor) -> Tensor:
        nrm = ad.sqrt(ad.sum_(ad.mul(z, z), axis=-1, keepdims=True) + 1e-12)
        return ad.mul(z, ad.powc(nrm, -1.0))

    zs, zt = unit(pooled_s), unit(pooled_t)
    inv_t = 1.0 / float(temperature)
    s_ss = ad.matmul(zs, ad.transpose(zs, (1, 0))) * inv_t
    s_st = ad.matmul(zs, ad.transpose(zt, (1, 0))) * inv_t
    s_tt = ad.matmul(zt, ad.transpose(zt, (1, 0))) * inv_t

    def row_logsumexp(*blocks: Tensor) -> Tensor:
        m = np.max([b.data.max(axis=1) for b in blocks], axis=0)[:, None]
        total = None
        for b in blocks:
            e = ad.sum_(ad.exp(b - m), axis=1, keepdims=True)
            total = e if total is None else total + e
        return ad.log(total) + m

    # source anchors: positives = source block; denominator adds the cross block
    pos_s = row_logsumexp(s_ss)
    all_s = row_logsumexp(s_ss, s_st)
    pos_t = row_logsumexp(s_tt)
    all_t = row_logsumexp(s_tt, ad.transpose(s_st, (1, 0)))
    loss_terms = ad.sum_(all_s - pos_s) + ad.sum_(all_t - pos_t)
    n_total = pooled_s.shape[0] + pooled_t.shape[0]
    return ad.mul(loss_terms, 1.0 / n_total)


def separation_loss(
    c_s_batch: list[ConditioningEmbedding],
    c_t_batch: list[ConditioningEmbedding],
    temperature: float,
) -> float:
    """Functional wrapper over :func:`separation_loss_graph` for raw embeddings."""
    if not c_s_batch or not c_t_batch:
        raise ValueError("each batch must contain at least one embedding")
    ps = Tensor(np.stack([pool_embedding(e) for e in c_s_batch]))
    pt = Tensor(np.stack([pool_embedding(e) for e in c_t_batch]))
    return float(separation_loss_graph(ps, pt, temperature).data)
