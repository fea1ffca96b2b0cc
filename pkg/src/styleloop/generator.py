"""One-step latent translator: a toy VAE around a toy text-conditioned UNet.

The VAE is a deterministic autoencoder (no KL, no sampling): three stride-2
convs down to 4 latent channels at 1/8 resolution, mirrored
nearest-upsample decoder, tanh-bounded output. The UNet runs 2 down / 1 mid
/ 2 up blocks, each conv + cross-attention over the [max_tokens, d_cond]
conditioning + feed-forward, with one learned constant timestep embedding
added per block, and predicts a residual over its input latent. Translation
is a single conditioned forward pass: decode(unet(encode(x), c)). Both
directions share these weights; only the conditioning differs.

Low-rank adapters attach to every UNet attention projection and
feed-forward linear, and to the VAE convolutions viewed as linear maps over
their flattened kernels. Requested ranks are capped per layer at
min(d_in, d_out).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lora import AdapterSet, delta_apply, init_adapter, merged_weight, parameter_count
from .text_encoder import D_COND, ConditioningEmbedding, _layer_seed

LATENT_CHANNELS = 4
DOWNSAMPLE = 8

VAE_ENC = [
    # (name, c_in, c_out, kernel, stride)
    ("enc1", 3, 32, 3, 2),
    ("enc2", 32, 64, 3, 2),
    ("enc3", 64, 128, 3, 2),
    ("enc_proj", 128, LATENT_CHANNELS, 1, 1),
]
VAE_DEC = [
    ("dec_proj", LATENT_CHANNELS, 128, 1, 1),
    ("dec1", 128, 64, 3, 1),  # preceded by nearest 2x upsample
    ("dec2", 64, 32, 3, 1),
    ("dec3", 32, 3, 3, 1),
]
UNET_BLOCKS = [
    # (name, c_in, c_out, kind)
    ("d1", LATENT_CHANNELS, 32, "down"),
    ("d2", 32, 64, "down"),
    ("mid", 64, 64, "mid"),
    ("u1", 64, 32, "up"),
    ("u2", 32, 32, "up"),
]
UNET_HEADS = 4
TIME_DIM = 64


@dataclass
class GeneratorWeights:
    vae_encoder: dict[str, Tensor]
    vae_decoder: dict[str, Tensor]
    unet: dict[str, Tensor]
    adapters: AdapterSet
    fixed_timestep_embedding: Tensor
    unet_skips: bool = False

    def base_items(self):
        for prefix, params in (
            ("vae_enc", self.vae_encoder),
            ("vae_dec", self.vae_decoder),
            ("unet", self.unet),
        ):
            for name in sorted(params):
                yield f"{prefix}.{name}", params[name]
        yield "time_embed", self.fixed_timestep_embedding

    def set_base_trainable(self, flag: bool) -> None:
        for _, t in self.base_items():
            t.requires_grad = flag


def _conv_param(rng, c_out, c_in, k, dtype, scale=1.0) -> Tensor:
    std = scale / np.sqrt(c_in * k * k)
    return Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype))


def build_generator(
    seed: int,
    lora_rank: int = 4,
    lora_alpha: float = 4.0,
    unet_skips: bool = False,
    with_adapters: bool = True,
    dtype=np.float32,
) -> GeneratorWeights:
    rng = np.random.default_rng([seed, 202])
    enc: dict[str, Tensor] = {}
    dec: dict[str, Tensor] = {}
    for name, c_in, c_out, k, _ in VAE_ENC:
        enc[f"{name}.weight"] = _conv_param(rng, c_out, c_in, k, dtype)
        enc[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=dtype))
    for name, c_in, c_out, k, _ in VAE_DEC:
        dec[f"{name}.weight"] = _conv_param(rng, c_out, c_in, k, dtype)
        dec[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=dtype))

    unet: dict[str, Tensor] = {}
    for name, c_in, c_out, _kind in UNET_BLOCKS:
        b = f"{name}"
        unet[f"{b}.conv.weight"] = _conv_param(rng, c_out, c_in, 3, dtype)
        unet[f"{b}.conv.bias"] = Tensor(np.zeros(c_out, dtype=dtype))
        unet[f"{b}.time_proj.weight"] = Tensor(
            rng.normal(0.0, TIME_DIM**-0.5, size=(c_out, TIME_DIM)).astype(dtype)
        )
        unet[f"{b}.time_proj.bias"] = Tensor(np.zeros(c_out, dtype=dtype))
        for ln in ("ln_attn", "ln_ffn"):
            unet[f"{b}.{ln}.g"] = Tensor(np.ones(c_out, dtype=dtype))
            unet[f"{b}.{ln}.b"] = Tensor(np.zeros(c_out, dtype=dtype))
        for proj, d_in in (("q", c_out), ("k", D_COND), ("v", D_COND), ("o", c_out)):
            unet[f"{b}.attn.{proj}.weight"] = Tensor(
                rng.normal(0.0, d_in**-0.5, size=(c_out, d_in)).astype(dtype)
            )
            unet[f"{b}.attn.{proj}.bias"] = Tensor(np.zeros(c_out, dtype=dtype))
        d_ff = 4 * c_out
        unet[f"{b}.ffn.fc1.weight"] = Tensor(
            rng.normal(0.0, c_out**-0.5, size=(d_ff, c_out)).astype(dtype)
        )
        unet[f"{b}.ffn.fc1.bias"] = Tensor(np.zeros(d_ff, dtype=dtype))
        unet[f"{b}.ffn.fc2.weight"] = Tensor(
            rng.normal(0.0, d_ff**-0.5, size=(c_out, d_ff)).astype(dtype)
        )
        unet[f"{b}.ffn.fc2.bias"] = Tensor(np.zeros(c_out, dtype=dtype))
    # small init keeps the residual UNet near identity at step 0
    unet["out.weight"] = _conv_param(rng, LATENT_CHANNELS, 32, 3, dtype, scale=0.05)
    unet["out.bias"] = Tensor(np.zeros(LATENT_CHANNELS, dtype=dtype))
    time_embed = Tensor(rng.normal(0.0, 1.0, size=(TIME_DIM,)).astype(dtype))

    adapters = AdapterSet(domain_tag="generator")
    if with_adapters:
        for dct, prefix, specs in ((enc, "vae_enc", VAE_ENC), (dec, "vae_dec", VAE_DEC)):
            for name, c_in, c_out, k, _ in specs:
                layer_id = f"{prefix}.{name}"
                d_in = c_in * k * k
                r = min(lora_rank, d_in, c_out)
                adapters.adapters[layer_id] = init_adapter(
                    d_in, c_out, r, lora_alpha, _layer_seed(seed + 7003, layer_id), layer_id
                )
        for name, c_in, c_out, _kind in UNET_BLOCKS:
            for proj, d_in in (("q", c_out), ("k", D_COND), ("v", D_COND), ("o", c_out)):
                layer_id = f"unet.{name}.attn.{proj}"
                r = min(lora_rank, d_in, c_out)
                adapters.adapters[layer_id] = init_adapter(
                    d_in, c_out, r, lora_alpha, _layer_seed(seed + 7003, layer_id), layer_id
                )
            d_ff = 4 * c_out
            for rel, d_in, d_out in (("ffn.fc1", c_out, d_ff), ("ffn.fc2", d_ff, c_out)):
                layer_id = f"unet.{name}.{rel}"
                r = min(lora_rank, d_in, d_out)
                adapters.adapters[layer_id] = init_adapter(
                    d_in, d_out, r, lora_alpha, _layer_seed(seed + 7003, layer_id), layer_id
                )
        if dtype is not np.float32:
            for ada in adapters.adapters.values():
                ada.A.data = ada.A.data.astype(dtype)
                ada.B.data = ada.B.data.astype(dtype)

    return GeneratorWeights(enc, dec, unet, adapters, time_embed, unet_skips)


def _adapted_conv(x, params, layer_id_full, key, stride, pad, adapters: AdapterSet):
    w = params[f"{key}.weight"]
    adapter = adapters.get(layer_id_full)
    if adapter is not None:
        w = merged_weight(w, adapter)
    y = ad.conv2d(x, w, stride=stride, pad=pad)
    return y + ad.reshape(params[f"{key}.bias"], (1, -1, 1, 1))


def vae_encode_graph(w: GeneratorWeights, x: Tensor) -> Tensor:
    h = x
    for name, _ci, _co, k, stride in VAE_ENC:
        h = _adapted_conv(h, w.vae_encoder, f"vae_enc.{name}", name, stride, k // 2, w.adapters)
        if name != "enc_proj":
            h = ad.gelu(h)
    return h


def vae_decode_graph(w: GeneratorWeights, z: Tensor) -> Tensor:
    h = z
    for name, _ci, _co, k, stride in VAE_DEC:
        if name != "dec_proj":
            h = ad.upsample_nearest2x(h)
        h = _adapted_conv(h, w.vae_decoder, f"vae_dec.{name}", name, stride, k // 2, w.adapters)
        if name != "dec3":
            h = ad.gelu(h)
    return ad.tanh(h)


def _adapted_token_linear(x, unet, layer_id, adapters):
    y = ad.linear(x, unet[f"{layer_id}.weight"], unet[f"{layer_id}.bias"])
    adapter = adapters.get(f"unet.{layer_id}")
    if adapter is not None:
        y = y + delta_apply(x, adapter)
    return y


def _cross_attention(tokens, unet, block, cond, key_bias, adapters):
    c = tokens.shape[-1]
    dh = c // UNET_HEADS
    n, hw = tokens.shape[0], tokens.shape[1]
    h = ad.layer_norm(tokens, unet[f"{block}.ln_attn.g"], unet[f"{block}.ln_attn.b"])
    q = _adapted_token_linear(h, unet, f"{block}.attn.q", adapters)
    k = _adapted_token_linear(cond, unet, f"{block}.attn.k", adapters)
    v = _adapted_token_linear(cond, unet, f"{block}.attn.v", adapters)
    t = cond.shape[0]
    q = ad.transpose(ad.reshape(q, (n, hw, UNET_HEADS, dh)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(k, (t, UNET_HEADS, dh)), (1, 0, 2))
    v = ad.transpose(ad.reshape(v, (t, UNET_HEADS, dh)), (1, 0, 2))
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (dh**-0.5)
    attn = ad.softmax(scores + key_bias, axis=-1)
    ctx = ad.matmul(attn, v)  # [n, heads, hw, dh]
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, hw, c))
    out = _adapted_token_linear(ctx, unet, f"{block}.attn.o", adapters)
    return tokens + out


def _ffn(tokens, unet, block, adapters):
    h = ad.layer_norm(tokens, unet[f"{block}.ln_ffn.g"], unet[f"{block}.ln_ffn.b"])
    h = _adapted_token_linear(h, unet, f"{block}.ffn.fc1", adapters)
    h = _adapted_token_linear(ad.gelu(h), unet, f"{block}.ffn.fc2", adapters)
    return tokens + h


def unet_graph(w: GeneratorWeights, z: Tensor, cond: Tensor, cond_mask: np.ndarray) -> Tensor:
    unet = w.unet
    dtype = z.dtype
    key_bias = ((cond_mask.astype(dtype) - 1.0) * 1e9).reshape(1, 1, 1, -1)
    h = z
    skip = None
    for name, _ci, c_out, kind in UNET_BLOCKS:
        if kind == "up":
            h = ad.upsample_nearest2x(h)
        stride = 2 if kind == "down" else 1
        h = ad.conv2d(h, unet[f"{name}.conv.weight"], stride=stride, pad=1)
        h = h + ad.reshape(unet[f"{name}.conv.bias"], (1, -1, 1, 1))
        t_vec = ad.linear(
            ad.reshape(w.fixed_timestep_embedding, (1, -1)),
            unet[f"{name}.time_proj.weight"],
            unet[f"{name}.time_proj.bias"],
        )
        h = h + ad.reshape(t_vec, (1, c_out, 1, 1))
        if w.unet_skips and name == "u1" and skip is not None:
            h = h + skip
        h = ad.gelu(h)
        n, _, hh, ww = h.shape
        tokens = ad.transpose(ad.reshape(h, (n, c_out, hh * ww)), (0, 2, 1))
        tokens = _cross_attention(tokens, unet, name, cond, key_bias, w.adapters)
        tokens = _ffn(tokens, unet, name, w.adapters)
        h = ad.reshape(ad.transpose(tokens, (0, 2, 1)), (n, c_out, hh, ww))
        if w.unet_skips and name == "d1":
            skip = h
    out = ad.conv2d(h, unet["out.weight"], stride=1, pad=1)
    out = out + ad.reshape(unet["out.bias"], (1, -1, 1, 1))
    return z + out


def translate_graph(w: GeneratorWeights, x: Tensor, cond: Tensor, cond_mask: np.ndarray) -> Tensor:
    z = vae_encode_graph(w, x)
    z2 = unet_graph(w, z, cond, cond_mask)
    return vae_decode_graph(w, z2)


# ---------------------------------------------------------------------------
# ndarray-facing inference ops
# ---------------------------------------------------------------------------


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected image [3, H, W], got {img.shape}")
    if img.shape[1] % DOWNSAMPLE or img.shape[2] % DOWNSAMPLE:
        raise ValueError(f"image size must be a multiple of {DOWNSAMPLE}, got {img.shape}")
    return img


def vae_encode(img: np.ndarray, w: GeneratorWeights) -> np.ndarray:
    """[3, H, W] in [-1, 1] -> latent [4, H/8, W/8]."""
    img = _check_image(img)
    dtype = w.vae_encoder["enc1.weight"].dtype
    with ad.no_grad():
        z = vae_encode_graph(w, Tensor(img[None].astype(dtype)))
    return z.data[0]


def vae_decode(z: np.ndarray, w: GeneratorWeights) -> np.ndarray:
    z = np.asarray(z)
    if z.ndim != 3 or z.shape[0] != LATENT_CHANNELS:
        raise ValueError(f"expected latent [4, h, w], got {z.shape}")
    dtype = w.vae_decoder["dec1.weight"].dtype
    with ad.no_grad():
        img = vae_decode_graph(w, Tensor(z[None].astype(dtype)))
    return img.data[0]


def translate(img: np.ndarray, c: ConditioningEmbedding, w: GeneratorWeights) -> np.ndarray:
    """Single conditioned forward pass; no sampling loop, no injected noise."""
    img = _check_image(img)
    dtype = w.vae_encoder["enc1.weight"].dtype
    if c.values.shape[1] != D_COND:
        raise ValueError(f"conditioning width {c.values.shape[1]} != {D_COND}")
    with ad.no_grad():
        out = translate_graph(
            w,
            Tensor(img[None].astype(dtype)),
            Tensor(c.values.astype(dtype)),
            c.attention_mask,
        )
    return out.data[0]


def trainable_parameter_count(w: GeneratorWeights, mode: str) -> int:
    """joint/two_stage train only the adapters; no_lora trains the full base."""
    if mode in ("joint", "two_stage"):
        return parameter_count(w.adapters)
    if mode == "no_lora":
        return int(sum(t.data.size for _, t in w.base_items()))
    raise ValueError(f"unknown training mode {mode!r}")
