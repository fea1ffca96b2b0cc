from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO_ROOT / "src"))

from styleloop.config import ExperimentConfig  # noqa: E402
from styleloop.distill import DistillationJob, FrozenGeneratorClient, distill  # noqa: E402

CORPUS_DIR = REPO_ROOT / "assets" / "fixture_corpus"
STYLES_DIR = REPO_ROOT / "assets" / "fixture_styles"

# paraphrase families used by training fixtures; index 0 is the main prompt
SOURCE_FAMILY = [
    "a natural photograph",
    "a photo",
    "a realistic photograph",
    "a snapshot of a real scene",
]
TARGET_FAMILY = [
    "a painting in the style of Van Gogh",
    "a Van Gogh style painting",
    "an oil painting with swirling brushstrokes",
    "a painting, impasto brushwork",
]


def toy_config(**overrides) -> ExperimentConfig:
    """Desk config used across tests: 64 px, small but real."""
    cfg = ExperimentConfig()
    cfg.image_size = 64
    cfg.train_steps = 6
    cfg.batch_size = 2
    cfg.lr = 1e-3
    cfg.checkpoint_every = 10_000
    cfg.prompts.source_prompt = SOURCE_FAMILY[0]
    cfg.prompts.source_paraphrases = SOURCE_FAMILY[1:]
    cfg.prompts.target_prompt = TARGET_FAMILY[0]
    cfg.prompts.target_paraphrases = TARGET_FAMILY[1:]
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg


def smoke_config(**overrides) -> ExperimentConfig:
    """The pinned 200-step smoke-training recipe (seed 42, 16 stub pairs)."""
    cfg = toy_config(train_steps=200, seed=42)
    cfg.lora.rank = 8
    cfg.lora.alpha = 8.0
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg


@pytest.fixture(scope="session")
def corpus_dir() -> Path:
    assert CORPUS_DIR.is_dir() and len(list(CORPUS_DIR.glob("*.png"))) == 16
    return CORPUS_DIR


@pytest.fixture(scope="session")
def styles_dir() -> Path:
    return STYLES_DIR


@pytest.fixture(scope="session")
def fixture_manifest(tmp_path_factory, corpus_dir):
    """Stub-distilled pseudo-pairs over the fixture corpus, shared by the
    training-side tests."""
    out = tmp_path_factory.mktemp("pairs")
    cfg = toy_config()
    job = DistillationJob(
        source_dir=str(corpus_dir),
        prompt_template=cfg.prompts.target_prompt,
        client=FrozenGeneratorClient(),
        output_dir=str(out),
        seed=42,
        source_prompt=cfg.prompts.source_prompt,
        image_size=cfg.image_size,
    )
    return distill(job)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
