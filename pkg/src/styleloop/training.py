"""Cycle-consistent training of the latent translator and domain encoders.

Every step runs both translation loops on a pseudo-paired batch:

    loop i:  x_s -> y_t = G(x_s, E_t(p_t)) -> x_hat_s = G(y_t, E_s(p_s))
    loop ii: x_p -> y_s = G(x_p, E_s(p_s)) -> x_hat_p = G(y_s, E_t(p_t))

and sums L1 + perceptual reconstruction terms over both loops, plus the
contrastive separation term over the step's prompt embeddings. Gradients
are accumulated over grad_accum_steps micro-batches, the global gradient
norm is clipped, and one AdamW update is applied.

Three modes: joint (all adapters together), two_stage (generator adapters
for the first half of the steps with encoders at base, then encoder
adapters with generator adapters frozen), and no_lora (no adapters at all,
full generator base fine-tuned, encoders frozen at base).

Everything is deterministic given the config seed: batches and prompt
sampling are pure functions of the step index, so a resumed run follows
the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ExperimentConfig
from .datasets import DatasetManifest, PseudoPair, batch_at, load_image
from .generator import GeneratorWeights, build_generator, translate_graph
from .lora import adapters_index, adapters_state, load_adapters_state, trainable_parameters
from .metrics import PERCEPTUAL_SEED, FeatureNet, build_feature_net, lpips, perceptual_distance_graph
from .text_encoder import (
    TextEncoderWeights,
    build_text_encoder,
    encoder_forward,
    pool_tokens,
    separation_loss_graph,
    tokenize,
)

CHECKPOINT_FORMAT = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class LossBreakdown:
    cycle_l1: float
    perceptual: float
    separation: float
    total: float

    @classmethod
    def combine(cls, cycle_l1, perceptual, separation, weights) -> "LossBreakdown":
        total = (
            weights.l1 * cycle_l1
            + weights.perceptual * perceptual
            + weights.separation * separation
        )
        return cls(cycle_l1, perceptual, separation, total)


@dataclass
class TrainState:
    step: int = 0
    mode: str = "joint"
    stage: int = 0
    opt_t: int = 0
    accum_counter: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


@dataclass
class ModelBundle:
    generator: GeneratorWeights
    encoders: TextEncoderWeights
    perceptual: FeatureNet


def build_models(cfg: ExperimentConfig, dtype=np.float32) -> ModelBundle:
    with_adapters = cfg.training_mode != "no_lora"
    gen = build_generator(
        seed=cfg.seed,
        lora_rank=cfg.lora.rank,
        lora_alpha=cfg.lora.alpha,
        unet_skips=cfg.unet_skips,
        with_adapters=with_adapters,
        dtype=dtype,
    )
    enc = build_text_encoder(
        seed=cfg.seed,
        lora_rank=cfg.lora.rank,
        lora_alpha=cfg.lora.alpha,
        max_tokens=cfg.max_tokens,
        dtype=dtype,
    )
    return ModelBundle(gen, enc, build_feature_net(PERCEPTUAL_SEED, dtype=dtype))


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def cycle_loss(reconstructed: np.ndarray, original: np.ndarray) -> float:
    """Mean absolute error over all elements."""
    reconstructed = np.asarray(reconstructed)
    original = np.asarray(original)
    if reconstructed.shape != original.shape:
        raise ValueError(f"shape mismatch: {reconstructed.shape} vs {original.shape}")
    return float(np.mean(np.abs(reconstructed - original)))


def perceptual_loss(a: np.ndarray, b: np.ndarray, net: FeatureNet | None = None) -> float:
    """Feature-space distance from the shared frozen perceptual net."""
    return lpips(a, b, net=net)


def _l1_graph(a: Tensor, b: Tensor) -> Tensor:
    return ad.mean(ad.absolute(a - b))


# ---------------------------------------------------------------------------
# mode plumbing
# ---------------------------------------------------------------------------


def stage_for_step(cfg: ExperimentConfig, step: int) -> int:
    if cfg.training_mode != "two_stage":
        return 0
    return 0 if step < cfg.train_steps // 2 else 1


def encoder_adapters_for(models: ModelBundle, mode: str, stage: int, domain: str):
    if mode == "no_lora":
        return None
    if mode == "two_stage" and stage == 0:
        return None
    return models.encoders.source_adapters if domain == "source" else models.encoders.target_adapters


def configure_trainables(models: ModelBundle, mode: str, stage: int) -> list[tuple[str, Tensor]]:
    """Flag exactly the parameter set this mode/stage trains; return it in a
    stable order."""
    models.generator.set_base_trainable(False)
    for t in models.encoders.base.values():
        t.requires_grad = False
    models.generator.adapters.set_trainable(False)
    models.encoders.source_adapters.set_trainable(False)
    models.encoders.target_adapters.set_trainable(False)

    trainables: list[tuple[str, Tensor]] = []
    if mode == "joint" or (mode == "two_stage" and stage == 0):
        models.generator.adapters.set_trainable(True)
        trainables += [(f"gen.{n}", t) for n, t in trainable_parameters(models.generator.adapters)]
    if mode == "joint" or (mode == "two_stage" and stage == 1):
        models.encoders.source_adapters.set_trainable(True)
        models.encoders.target_adapters.set_trainable(True)
        trainables += [
            (f"enc_src.{n}", t) for n, t in trainable_parameters(models.encoders.source_adapters)
        ]
        trainables += [
            (f"enc_tgt.{n}", t) for n, t in trainable_parameters(models.encoders.target_adapters)
        ]
    if mode == "no_lora":
        models.generator.set_base_trainable(True)
        trainables += [(f"genbase.{n}", t) for n, t in models.generator.base_items()]
    return trainables


# ---------------------------------------------------------------------------
# the optimization step
# ---------------------------------------------------------------------------


def adamw_step(p, g, m, v, t, lr, weight_decay, betas, eps=1e-8):
    """One decoupled-weight-decay Adam update; returns (p', m', v')."""
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * g
    v = b2 * v + (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    p = p - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * p
    return p, m, v


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def _sample_prompts(cfg: ExperimentConfig, step: int, micro: int) -> tuple[list[str], list[str]]:
    """Step-deterministic choice of prompts; index 0 conditions the
    generator, the whole sample feeds the separation term."""
    fam_s = cfg.prompts.source_family()
    fam_t = cfg.prompts.target_family()
    rng = np.random.default_rng([cfg.seed, step, micro, 11])
    k_s = min(4, len(fam_s))
    k_t = min(4, len(fam_t))
    pick_s = [fam_s[i] for i in rng.permutation(len(fam_s))[:k_s]]
    pick_t = [fam_t[i] for i in rng.permutation(len(fam_t))[:k_t]]
    return pick_s, pick_t


def _micro_batch_loss(
    micro_pairs: list[PseudoPair],
    models: ModelBundle,
    cfg: ExperimentConfig,
    step: int,
    micro: int,
    image_cache: dict,
    dtype,
    translate_fn=None,
) -> tuple[Tensor, LossBreakdown]:
    if not micro_pairs:
        raise TrainingError("empty micro-batch")
    translate_fn = translate_fn or translate_graph
    prompts_s, prompts_t = _sample_prompts(cfg, step, micro)

    embeddings: dict[tuple[str, str], Tensor] = {}
    masks: dict[str, np.ndarray] = {}

    def embed(prompt: str, domain: str) -> Tensor:
        key = (domain, prompt)
        if key not in embeddings:
            tokens = tokenize(prompt, cfg.max_tokens)
            aset = encoder_adapters_for(models, cfg.training_mode, stage_for_step(cfg, step), domain)
            embeddings[key] = encoder_forward(models.encoders, tokens, adapters=aset)
            masks[prompt] = tokens.attention_mask
        return embeddings[key]

    c_s = embed(prompts_s[0], "source")
    c_t = embed(prompts_t[0], "target")
    mask_s, mask_t = masks[prompts_s[0]], masks[prompts_t[0]]

    def load(p: str) -> np.ndarray:
        if p not in image_cache:
            image_cache[p] = load_image(p, cfg.image_size)
        return image_cache[p]

    x_s = Tensor(np.stack([load(pr.source_path) for pr in micro_pairs]).astype(dtype))
    x_p = Tensor(np.stack([load(pr.pseudo_path) for pr in micro_pairs]).astype(dtype))

    # loop i: source -> style -> back
    y_t = translate_fn(models.generator, x_s, c_t, mask_t)
    x_s_hat = translate_fn(models.generator, y_t, c_s, mask_s)
    # loop ii: pseudo style -> natural -> back
    y_s = translate_fn(models.generator, x_p, c_s, mask_s)
    x_p_hat = translate_fn(models.generator, y_s, c_t, mask_t)

    cyc = _l1_graph(x_s_hat, x_s) + _l1_graph(x_p_hat, x_p)
    perc = perceptual_distance_graph(models.perceptual, x_s_hat, x_s) + perceptual_distance_graph(
        models.perceptual, x_p_hat, x_p
    )
    pooled_s = ad.stack0([pool_tokens(embed(p, "source"), masks[p]) for p in prompts_s])
    pooled_t = ad.stack0([pool_tokens(embed(p, "target"), masks[p]) for p in prompts_t])
    sep = separation_loss_graph(pooled_s, pooled_t, cfg.separation_temperature)

    w = cfg.loss_weights
    total_graph = ad.mul(cyc, w.l1) + ad.mul(perc, w.perceptual) + ad.mul(sep, w.separation)
    breakdown = LossBreakdown.combine(float(cyc.data), float(perc.data), float(sep.data), w)
    if not np.isfinite(breakdown.total):
        raise TrainingError(
            f"non-finite loss at step {step}: cycle={breakdown.cycle_l1} "
            f"perceptual={breakdown.perceptual} separation={breakdown.separation}"
        )
    return total_graph, breakdown


def training_step(
    micro_batches: list[list[PseudoPair]],
    models: ModelBundle,
    state: TrainState,
    cfg: ExperimentConfig,
    image_cache: dict | None = None,
    dtype=np.float32,
    translate_fn=None,
) -> LossBreakdown:
    """Run grad_accum_steps micro-batches, clip, and apply one AdamW update."""
    if image_cache is None:
        image_cache = {}
    stage = stage_for_step(cfg, state.step)
    if stage != state.stage:
        state.stage = stage
        state.moments = {}
        state.opt_t = 0
    trainables = configure_trainables(models, cfg.training_mode, stage)
    if not trainables:
        raise TrainingError(f"no trainable parameters in mode {cfg.training_mode}")
    for _, p in trainables:
        p.grad = None

    terms = np.zeros(3, dtype=np.float64)
    inv_accum = 1.0 / len(micro_batches)
    for micro, pairs in enumerate(micro_batches):
        total_graph, breakdown = _micro_batch_loss(
            pairs, models, cfg, state.step, micro, image_cache, dtype, translate_fn
        )
        ad.mul(total_graph, inv_accum).backward()
        state.accum_counter += 1
        terms += (breakdown.cycle_l1, breakdown.perceptual, breakdown.separation)

    grads = []
    for name, p in trainables:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        grads.append(p.grad)
    clip_global_norm(grads, cfg.grad_clip_norm)

    state.opt_t += 1
    for name, p in trainables:
        m, v = state.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        p.data, m, v = adamw_step(
            p.data, p.grad, m, v, state.opt_t, cfg.lr, cfg.weight_decay, cfg.adam_betas
        )
        state.moments[name] = (m, v)
        p.grad = None

    state.step += 1
    terms *= inv_accum
    return LossBreakdown.combine(terms[0], terms[1], terms[2], cfg.loss_weights)


# ---------------------------------------------------------------------------
# hashes and checkpoints
# ---------------------------------------------------------------------------


def _hash_arrays(items) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(items):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def generator_base_hash(gen: GeneratorWeights) -> str:
    return _hash_arrays((n, t.data) for n, t in gen.base_items())


def encoder_base_hash(enc: TextEncoderWeights) -> str:
    return _hash_arrays((n, t.data) for n, t in enc.base.items())


def generator_adapters_hash(gen: GeneratorWeights) -> str:
    return _hash_arrays(adapters_state(gen.adapters).items())


def _config_snapshot(cfg: ExperimentConfig) -> dict:
    snap = dataclasses.asdict(cfg)
    snap["adam_betas"] = list(cfg.adam_betas)
    return snap


def save_checkpoint(
    models: ModelBundle,
    state: TrainState,
    cfg: ExperimentConfig,
    path: str | Path,
    history: list[dict] | None = None,
    extra_meta: dict | None = None,
) -> Path:
    """Write a complete resumable checkpoint directory atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)

    np.savez(tmp / "gen_base.npz", **{n: t.data for n, t in models.generator.base_items()})
    np.savez(tmp / "enc_base.npz", **{n: t.data for n, t in models.encoders.base.items()})
    np.savez(tmp / "adapters_gen.npz", **adapters_state(models.generator.adapters))
    np.savez(tmp / "adapters_enc_src.npz", **adapters_state(models.encoders.source_adapters))
    np.savez(tmp / "adapters_enc_tgt.npz", **adapters_state(models.encoders.target_adapters))
    opt: dict[str, np.ndarray] = {}
    for name, (m, v) in state.moments.items():
        opt[f"m::{name}"] = m
        opt[f"v::{name}"] = v
    np.savez(tmp / "optimizer.npz", **opt)

    meta = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "mode": state.mode,
        "stage": state.stage,
        "opt_t": state.opt_t,
        "accum_counter": state.accum_counter,
        "config": _config_snapshot(cfg),
        "generator_base_hash": generator_base_hash(models.generator),
        "encoder_base_hash": encoder_base_hash(models.encoders),
        "perceptual_seed": models.perceptual.seed,
        "adapter_index": {
            "generator": adapters_index(models.generator.adapters),
            "enc_source": adapters_index(models.encoders.source_adapters),
            "enc_target": adapters_index(models.encoders.target_adapters),
        },
    }
    if extra_meta:
        meta.update(extra_meta)
    (tmp / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    if history is not None:
        write_history(history, tmp / "loss_history.csv")

    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(
    path: str | Path, cfg: ExperimentConfig | None = None, dtype=np.float32
) -> tuple[ModelBundle, TrainState, dict]:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise CheckpointError(f"not a checkpoint directory: {path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    saved_cfg = ExperimentConfig()
    from .config import _apply  # shared nested-field application

    _apply(saved_cfg, meta["config"], "")
    if cfg is not None:
        for fieldname in ("rank", "alpha"):
            saved = getattr(saved_cfg.lora, fieldname)
            ours = getattr(cfg.lora, fieldname)
            if saved != ours:
                raise CheckpointError(
                    f"config mismatch on lora.{fieldname}: checkpoint has {saved}, config has {ours} "
                    f"(checkpoint config hash {_dict_hash(meta['config'])}, "
                    f"ours {_dict_hash(_config_snapshot(cfg))})"
                )
    models = build_models(saved_cfg, dtype=dtype)
    _load_npz_into(path / "gen_base.npz", dict(models.generator.base_items()))
    _load_npz_into(path / "enc_base.npz", models.encoders.base)
    load_adapters_state(models.generator.adapters, dict(np.load(path / "adapters_gen.npz")))
    load_adapters_state(models.encoders.source_adapters, dict(np.load(path / "adapters_enc_src.npz")))
    load_adapters_state(models.encoders.target_adapters, dict(np.load(path / "adapters_enc_tgt.npz")))

    state = TrainState(
        step=int(meta["step"]),
        mode=meta["mode"],
        stage=int(meta["stage"]),
        opt_t=int(meta["opt_t"]),
        accum_counter=int(meta.get("accum_counter", 0)),
    )
    with np.load(path / "optimizer.npz") as opt:
        names = sorted({k.split("::", 1)[1] for k in opt.files})
        for name in names:
            state.moments[name] = (opt[f"m::{name}"].copy(), opt[f"v::{name}"].copy())
    return models, state, meta


def _dict_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _load_npz_into(npz_path: Path, params: dict[str, Tensor]) -> None:
    with np.load(npz_path) as data:
        for name, tensor in params.items():
            tensor.data = np.asarray(data[name], dtype=tensor.dtype)


def write_history(history: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "cycle_l1", "perceptual", "separation", "total"])
        writer.writeheader()
        writer.writerows(history)


def read_history(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------------------
# the full run
# ---------------------------------------------------------------------------


def validation_cycle_loss(
    models: ModelBundle, cfg: ExperimentConfig, manifest: DatasetManifest, k: int = 8
) -> float:
    """Stylize-then-destylize L1 on the first k source images, at current
    weights; logged into the final checkpoint for downstream sanity bounds."""
    stage = stage_for_step(cfg, cfg.train_steps)
    pairs = sorted(manifest.pairs, key=lambda p: p.source_path)[:k]
    losses = []
    with ad.no_grad():
        c_t = _inference_embedding(models, cfg, "target", stage)
        c_s = _inference_embedding(models, cfg, "source", stage)
        for pr in pairs:
            x = load_image(pr.source_path, cfg.image_size)
            y = translate_graph(models.generator, Tensor(x[None]), c_t[0], c_t[1])
            back = translate_graph(models.generator, y, c_s[0], c_s[1])
            losses.append(cycle_loss(back.data[0], x))
    return float(np.mean(losses))


def _inference_embedding(models: ModelBundle, cfg: ExperimentConfig, domain: str, stage: int):
    prompt = cfg.prompts.source_prompt if domain == "source" else cfg.prompts.target_prompt
    tokens = tokenize(prompt, cfg.max_tokens)
    aset = encoder_adapters_for(models, cfg.training_mode, stage, domain)
    emb = encoder_forward(models.encoders, tokens, adapters=aset)
    return emb, tokens.attention_mask


def train(
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    checkpoint_dir: str | Path,
    resume_from: str | Path | None = None,
    log_every: int = 50,
    log_fn=None,
) -> Path:
    """Run cfg.train_steps steps and return the final checkpoint path."""
    if not manifest.pairs:
        raise TrainingError("manifest has no pairs")
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    if resume_from is not None:
        models, state, _meta = load_checkpoint(resume_from, cfg)
        hist_file = Path(resume_from) / "loss_history.csv"
        if hist_file.exists():
            history = [row for row in read_history(hist_file) if row["step"] < state.step]
    else:
        models = build_models(cfg)
        state = TrainState(mode=cfg.training_mode)

    image_cache: dict[str, np.ndarray] = {}
    while state.step < cfg.train_steps:
        step_idx = state.step
        micro_batches = [
            batch_at(manifest, cfg.batch_size, cfg.seed, step_idx * cfg.grad_accum_steps + m)
            for m in range(cfg.grad_accum_steps)
        ]
        breakdown = training_step(micro_batches, models, state, cfg, image_cache)
        history.append(
            {
                "step": step_idx,
                "cycle_l1": breakdown.cycle_l1,
                "perceptual": breakdown.perceptual,
                "separation": breakdown.separation,
                "total": breakdown.total,
            }
        )
        if log_fn and (step_idx % log_every == 0 or state.step == cfg.train_steps):
            log_fn(step_idx, breakdown)
        if state.step % cfg.checkpoint_every == 0 and state.step < cfg.train_steps:
            save_checkpoint(
                models, state, cfg, checkpoint_dir / f"step_{state.step:06d}", history
            )

    val_loss = validation_cycle_loss(models, cfg, manifest)
    final = save_checkpoint(
        models,
        state,
        cfg,
        checkpoint_dir / "final",
        history,
        extra_meta={"validation_cycle_l1": val_loss},
    )
    write_history(history, checkpoint_dir / "loss_history.csv")
    return final
