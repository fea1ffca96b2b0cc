"""Experiment configuration: one JSON document drives every pipeline stage.

Desk-scale defaults are runnable on a laptop CPU; full-scale settings
(40000 steps, 256 px) are reachable by explicit override and documented in
the README side by side.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

CONFIG_ENV_VAR = "STYLELOOP_CONFIG"
WORKDIR_ENV_VAR = "STYLELOOP_WORKDIR"

VAE_DOWNSAMPLE = 8
MAX_TOKENS = 77


class ConfigError(ValueError):
    """Raised for unreadable or unparseable config files."""


@dataclass
class DomainPrompts:
    source_prompt: str = "a natural photograph"
    target_prompt: str = "a painting in the style of Van Gogh"
    # Optional paraphrase families; used by the separation loss and report.
    source_paraphrases: list[str] = field(default_factory=list)
    target_paraphrases: list[str] = field(default_factory=list)

    def source_family(self) -> list[str]:
        return [self.source_prompt] + list(self.source_paraphrases)

    def target_family(self) -> list[str]:
        return [self.target_prompt] + list(self.target_paraphrases)


@dataclass
class LossWeights:
    l1: float = 1.0
    perceptual: float = 1.0
    separation: float = 0.1


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 4.0


@dataclass
class PathsConfig:
    source_dir: str = "data/source"
    style_dir: str = "data/style"
    manifest: str = "data/pairs/manifest.jsonl"
    checkpoints: str = "checkpoints"
    outputs: str = "outputs"


@dataclass
class ExperimentConfig:
    prompts: DomainPrompts = field(default_factory=DomainPrompts)
    image_size: int = 256
    train_steps: int = 400  # full-scale runs use 40000
    batch_size: int = 2
    grad_accum_steps: int = 1
    lr: float = 1e-5
    weight_decay: float = 1e-2
    adam_betas: tuple[float, float] = (0.9, 0.999)
    grad_clip_norm: float = 1.0
    seed: int = 42
    loss_weights: LossWeights = field(default_factory=LossWeights)
    training_mode: str = "joint"  # joint | two_stage | no_lora
    lora: LoraConfig = field(default_factory=LoraConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    separation_temperature: float = 0.1
    unet_skips: bool = False
    mixed_precision: bool = False  # documented flag; desk runs stay full precision
    checkpoint_every: int = 100
    max_tokens: int = MAX_TOKENS

    @property
    def latent_size(self) -> int:
        return self.image_size // VAE_DOWNSAMPLE


TRAINING_MODES = ("joint", "two_stage", "no_lora")

_NESTED_FIELDS = {
    "prompts": DomainPrompts,
    "loss_weights": LossWeights,
    "lora": LoraConfig,
    "paths": PathsConfig,
}


def _apply(obj, values: dict, prefix: str) -> None:
    known = {f.name for f in dataclasses.fields(obj)}
    for key, val in values.items():
        if key not in known:
            log.warning("ignoring unknown config key %r", prefix + key)
            continue
        if key in _NESTED_FIELDS and isinstance(val, dict):
            _apply(getattr(obj, key), val, prefix + key + ".")
        elif key == "adam_betas":
            setattr(obj, key, tuple(float(v) for v in val))
        else:
            setattr(obj, key, val)


def load_config(path: str | Path) -> ExperimentConfig:
    """Load a JSON config; unset fields fall back to defaults.

    An empty file is a valid config (all defaults). Unknown keys are
    reported via logging and otherwise ignored. Invariant violations are
    fatal here; use :func:`validate_config` for a non-raising report.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8").strip()
    cfg = ExperimentConfig()
    if text:
        try:
            values = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON ({path}): {e}") from e
        if not isinstance(values, dict):
            raise ConfigError(f"config root must be a JSON object, got {type(values).__name__}")
        _apply(cfg, values, "")
    violations = validate_config(cfg)
    if violations:
        raise ConfigError("invalid config: " + "; ".join(v.message for v in violations))
    return cfg


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dataclasses.asdict(cfg)
    payload["adam_betas"] = list(cfg.adam_betas)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Violation:
    field: str
    message: str


def validate_config(cfg: ExperimentConfig) -> list[Violation]:
    """Return every violated invariant; an empty list means valid."""
    out: list[Violation] = []

    def bad(name: str, msg: str) -> None:
        out.append(Violation(name, f"{name}: {msg}"))

    for name in ("train_steps", "batch_size", "grad_accum_steps", "checkpoint_every", "max_tokens"):
        if int(getattr(cfg, name)) < 1:
            bad(name, "must be >= 1")
    if cfg.lora.rank < 1:
        bad("lora.rank", "must be >= 1")
    if cfg.lr <= 0:
        bad("lr", "must be > 0")
    if cfg.grad_clip_norm <= 0:
        bad("grad_clip_norm", "must be > 0")
    if cfg.separation_temperature <= 0:
        bad("separation_temperature", "must be > 0")
    if cfg.image_size < VAE_DOWNSAMPLE or cfg.image_size % VAE_DOWNSAMPLE != 0:
        bad("image_size", f"must be a positive multiple of {VAE_DOWNSAMPLE}")
    if cfg.training_mode not in TRAINING_MODES:
        bad("training_mode", f"must be one of {TRAINING_MODES}")
    for wname in ("l1", "perceptual", "separation"):
        if getattr(cfg.loss_weights, wname) < 0:
            bad(f"loss_weights.{wname}", "must be >= 0")
    if not cfg.prompts.source_prompt:
        bad("prompts.source_prompt", "must be non-empty")
    if not cfg.prompts.target_prompt:
        bad("prompts.target_prompt", "must be non-empty")
    for pname, plist in (
        ("source", cfg.prompts.source_family()),
        ("target", cfg.prompts.target_family()),
    ):
        for p in plist:
            # byte-level tokenization: BOS + utf-8 bytes + EOS must fit
            if p and len(p.encode("utf-8")) + 2 > cfg.max_tokens:
                bad(f"prompts.{pname}", f"prompt longer than {cfg.max_tokens} tokens: {p!r}")
    return out


def resolve_config_path(explicit: str | None) -> str | None:
    """CLI helper: --config flag wins, then the environment variable."""
    if explicit:
        return explicit
    return os.environ.get(CONFIG_ENV_VAR) or None
