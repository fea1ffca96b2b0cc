"""Image I/O, normalization, and the persisted pseudo-paired dataset.

Images are float arrays [3, H, W] in [-1, 1], mapped linearly from 8-bit
RGB; the mapping is a bijection on the 8-bit lattice (load(save(x)) == x).
Resizing is always bilinear, so results are pinned across platforms.

Manifest file format (line-oriented JSON, documented in docs/formats.md):
    line 1: {"domain_tag": ..., "created_seed": ...}
    lines 2..: one PseudoPair object per line with keys
               source_path, pseudo_path, source_prompt, target_prompt,
               generator_id, seed
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

DOMAIN_TAGS = ("source", "target", "paired")


class ManifestError(ValueError):
    """Malformed or invariant-violating manifest data."""


def load_image(path: str | Path, size: int) -> np.ndarray:
    """Read any PIL-supported image as RGB, bilinear-resize to size x size,
    and map [0, 255] -> [-1, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, SyntaxError) as e:
        raise OSError(f"unreadable image {path}: {e}") from e
    arr = arr / 255.0 * 2.0 - 1.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Clamp to [-1, 1], map back to 8-bit, write PNG."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    arr = np.clip(img, -1.0, 1.0)
    arr = np.round((arr + 1.0) / 2.0 * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


@dataclass
class PseudoPair:
    source_path: str
    pseudo_path: str
    source_prompt: str
    target_prompt: str
    generator_id: str = "local_stub"
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "source_path": self.source_path,
            "pseudo_path": self.pseudo_path,
            "source_prompt": self.source_prompt,
            "target_prompt": self.target_prompt,
            "generator_id": self.generator_id,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PseudoPair":
        try:
            return cls(
                source_path=d["source_path"],
                pseudo_path=d["pseudo_path"],
                source_prompt=d["source_prompt"],
                target_prompt=d["target_prompt"],
                generator_id=d.get("generator_id", "local_stub"),
                seed=int(d.get("seed", 0)),
            )
        except KeyError as e:
            raise ManifestError(f"pair record missing key {e}") from e


@dataclass
class DatasetManifest:
    pairs: list[PseudoPair] = field(default_factory=list)
    domain_tag: str = "paired"
    created_seed: int = 0


def _check_manifest(manifest: DatasetManifest, check_files: bool) -> None:
    if manifest.domain_tag not in DOMAIN_TAGS:
        raise ManifestError(f"unknown domain_tag {manifest.domain_tag!r}")
    if manifest.domain_tag == "paired" and not manifest.pairs:
        raise ManifestError("paired manifest must contain at least one pair")
    seen: set[str] = set()
    for p in manifest.pairs:
        if p.source_path in seen:
            raise ManifestError(f"duplicate source_path: {p.source_path}")
        seen.add(p.source_path)
        if not p.source_prompt or not p.target_prompt:
            raise ManifestError(f"empty prompt in pair for {p.source_path}")
        if check_files:
            for fp in (p.source_path, p.pseudo_path):
                if not Path(fp).exists():
                    raise ManifestError(f"pair file does not exist: {fp}")


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    _check_manifest(manifest, check_files=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"domain_tag": manifest.domain_tag, "created_seed": manifest.created_seed}) + "\n")
        for p in manifest.pairs:
            fh.write(json.dumps(p.to_json()) + "\n")
    os.replace(tmp, path)


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"empty manifest: {path}")
    try:
        header = json.loads(lines[0])
        pairs = [PseudoPair.from_json(json.loads(ln)) for ln in lines[1:]]
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest line in {path}: {e}") from e
    manifest = DatasetManifest(
        pairs=pairs,
        domain_tag=header.get("domain_tag", "paired"),
        created_seed=int(header.get("created_seed", 0)),
    )
    _check_manifest(manifest, check_files=False)
    return manifest


def epoch_batches(
    manifest: DatasetManifest, batch_size: int, shuffle_seed: int
) -> list[list[PseudoPair]]:
    """One epoch: a seed-deterministic permutation chunked into batches; the
    final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(shuffle_seed).permutation(len(manifest.pairs))
    out = []
    for start in range(0, len(order), batch_size):
        out.append([manifest.pairs[i] for i in order[start : start + batch_size]])
    return out


def iterate_batches(
    manifest: DatasetManifest, batch_size: int, shuffle_seed: int, epochs: int = 1
) -> Iterator[list[PseudoPair]]:
    """Stream batches across epochs; epoch e uses shuffle_seed + e."""
    for e in range(epochs):
        yield from epoch_batches(manifest, batch_size, shuffle_seed + e)


def batch_at(
    manifest: DatasetManifest, batch_size: int, shuffle_seed: int, batch_index: int
) -> list[PseudoPair]:
    """Pure positional batch lookup used by the training loop, so a resumed
    run consumes exactly the batches an uninterrupted run would."""
    per_epoch = (len(manifest.pairs) + batch_size - 1) // batch_size
    epoch, pos = divmod(batch_index, per_epoch)
    return epoch_batches(manifest, batch_size, shuffle_seed + epoch)[pos]


def list_images(directory: str | Path) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
    directory = Path(directory)
    if not directory.is_dir():
        raise NotADirectoryError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in exts)
