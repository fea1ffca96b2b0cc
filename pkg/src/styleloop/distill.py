"""Pseudo-pair synthesis: run every source image through a frozen stylizer.

Two stylizer clients exist. ``local_stub`` is a deterministic procedural
stylizer (palette remap + oriented stroke texture + mild edge emphasis,
all keyed by hash(prompt, seed)) that stands in for a real frozen
generator at desk scale. ``remote_http`` POSTs JSON
``{"image": <base64 PNG>, "prompt": str, "seed": int}`` and expects
``{"image": <base64 PNG>}`` back at the same resolution; transport
failures are retried 3x with exponential backoff, then the single item is
recorded as skipped and the job continues.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .datasets import (
    DatasetManifest,
    PseudoPair,
    list_images,
    load_image,
    save_image,
    write_manifest,
)


class DistillationError(RuntimeError):
    pass


@dataclass
class FrozenGeneratorClient:
    kind: str = "local_stub"  # local_stub | remote_http
    generator_id: str = "local_stub"
    endpoint: str = ""
    request_seed: int = 0
    retries: int = 3
    backoff: float = 0.25
    timeout: float = 10.0


@dataclass
class DistillationJob:
    source_dir: str
    prompt_template: str  # target style prompt
    client: FrozenGeneratorClient
    output_dir: str
    seed: int = 42
    source_prompt: str = "a natural photograph"
    image_size: int = 256


# ---------------------------------------------------------------------------
# procedural stub stylizer
# ---------------------------------------------------------------------------


def style_params(prompt: str, seed: int) -> dict:
    """Derive the stub's style recipe from hash(prompt, seed)."""
    digest = hashlib.sha256(f"{prompt}|{seed}".encode("utf-8")).digest()
    rng = np.random.default_rng(np.frombuffer(digest[:16], dtype="<u8"))
    mix = np.eye(3) + rng.uniform(-0.3, 0.3, size=(3, 3))
    mix = mix / np.abs(mix).sum(axis=1, keepdims=True)
    return {
        "mix": mix,
        "bias": rng.uniform(-0.1, 0.1, size=(3, 1, 1)),
        "angle": rng.uniform(0.0, np.pi),
        "freq": rng.uniform(3.0, 9.0),
        "phase": rng.uniform(0.0, 2.0 * np.pi),
        "stroke_amp": rng.uniform(0.06, 0.13),
        "edge_gain": rng.uniform(0.2, 0.45),
    }


def _box_blur3(img: np.ndarray) -> np.ndarray:
    pad = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += pad[:, dy : dy + img.shape[1], dx : dx + img.shape[2]]
    return out / 9.0


def stub_stylize(img: np.ndarray, prompt: str, seed: int) -> np.ndarray:
    """Deterministic structure-preserving stylization of a [3, H, W] image."""
    img = np.asarray(img, dtype=np.float64)
    p = style_params(prompt, seed)
    out = np.tensordot(p["mix"], img, axes=(1, 0)) + p["bias"]
    h, w = img.shape[1], img.shape[2]
    yy, xx = np.meshgrid(np.linspace(0, 1, h, endpoint=False), np.linspace(0, 1, w, endpoint=False), indexing="ij")
    ramp = xx * np.cos(p["angle"]) + yy * np.sin(p["angle"])
    out = out + p["stroke_amp"] * np.sin(2.0 * np.pi * p["freq"] * ramp + p["phase"])
    out = out + p["edge_gain"] * (out - _box_blur3(out))
    return np.clip(out, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# remote client
# ---------------------------------------------------------------------------


def png_b64(img: np.ndarray) -> str:
    arr = np.clip(np.asarray(img), -1.0, 1.0)
    arr = np.round((arr + 1.0) / 2.0 * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def b64_png_image(payload: str) -> np.ndarray:
    raw = base64.b64decode(payload)
    with Image.open(io.BytesIO(raw)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / 255.0 * 2.0 - 1.0


def remote_stylize(client: FrozenGeneratorClient, img: np.ndarray, prompt: str) -> np.ndarray:
    """One round trip to the remote stylizer; raises DistillationError on a
    non-retryable or exhausted failure."""
    body = json.dumps(
        {"image": png_b64(img), "prompt": prompt, "seed": client.request_seed}
    ).encode("utf-8")
    last_err: Exception | None = None
    for attempt in range(client.retries):
        req = urllib.request.Request(
            client.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=client.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
            break
        except (urllib.error.URLError, TimeoutError, OSError) as e:
            last_err = e
            if attempt + 1 < client.retries:
                time.sleep(client.backoff * (2**attempt))
    else:
        raise DistillationError(f"remote stylize failed after {client.retries} attempts: {last_err}")
    if not isinstance(payload, dict) or "image" not in payload:
        raise DistillationError("malformed remote response: missing 'image'")
    try:
        out = b64_png_image(payload["image"])
    except Exception as e:
        raise DistillationError(f"malformed remote response: {e}") from e
    if out.shape != img.shape:
        raise DistillationError(f"remote returned shape {out.shape}, expected {img.shape}")
    return out


# ---------------------------------------------------------------------------
# the distillation job
# ---------------------------------------------------------------------------


def _item_seed(job_seed: int, filename: str) -> int:
    digest = hashlib.sha256(f"{job_seed}|{filename}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**31 - 1)


def distill(job: DistillationJob) -> DatasetManifest:
    """Synthesize one pseudo-target per readable source image and persist the
    pair manifest (atomically) plus a sidecar skip list.

    Items are processed in sorted filename order; with the local stub the
    whole job is byte-reproducible under a fixed seed.
    """
    files = list_images(job.source_dir)
    if not files:
        raise DistillationError(f"no images found in {job.source_dir}")
    out_dir = Path(job.output_dir)
    pseudo_dir = out_dir / "pseudo"
    pseudo_dir.mkdir(parents=True, exist_ok=True)

    pairs: list[PseudoPair] = []
    skips: list[dict] = []
    for src in files:
        item_seed = _item_seed(job.seed, src.name)
        try:
            img = load_image(src, job.image_size)
            if job.client.kind == "local_stub":
                styled = stub_stylize(img, job.prompt_template, item_seed)
            elif job.client.kind == "remote_http":
                job.client.request_seed = item_seed
                styled = remote_stylize(job.client, img, job.prompt_template)
            else:
                raise DistillationError(f"unknown client kind {job.client.kind!r}")
        except (OSError, DistillationError) as e:
            skips.append({"source_path": str(src), "reason": str(e)})
            continue
        dest = pseudo_dir / f"{src.stem}.png"
        save_image(styled, dest)
        pairs.append(
            PseudoPair(
                source_path=str(src),
                pseudo_path=str(dest),
                source_prompt=job.source_prompt,
                target_prompt=job.prompt_template,
                generator_id=job.client.generator_id,
                seed=item_seed,
            )
        )

    skip_path = out_dir / "manifest.skips.json"
    skip_path.write_text(json.dumps(skips, indent=2) + "\n", encoding="utf-8")
    if not pairs:
        raise DistillationError(f"every item failed; see {skip_path}")
    manifest = DatasetManifest(pairs=pairs, domain_tag="paired", created_seed=job.seed)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
