"""Single command-line entry point for the full pipeline.

Subcommands: distill, train, stylize, destylize, evaluate,
separation-report. All paths resolve relative to --workdir (or the
STYLELOOP_WORKDIR environment variable); the config path falls back to
STYLELOOP_CONFIG. Exit codes: 0 success, 1 usage error, 2 runtime
failure. The last stdout line of every command is a machine-readable JSON
summary.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import (
    WORKDIR_ENV_VAR,
    ConfigError,
    ExperimentConfig,
    load_config,
    resolve_config_path,
)
from .datasets import ManifestError, list_images, read_manifest, save_image
from .distill import DistillationError, DistillationJob, FrozenGeneratorClient, distill
from .generator import translate_graph
from .metrics import MetricsError, evaluate
from .text_encoder import (
    ConditioningEmbedding,
    embedding_separation,
    encoder_forward,
    pool_embedding,
    tokenize,
)
from .training import (
    CheckpointError,
    TrainingError,
    load_checkpoint,
    read_history,
    train,
)


class UsageError(Exception):
    pass


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list[str] = field(default_factory=list)
    summary: str = ""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="styleloop", description=__doc__)
    p.add_argument("--config", help="config JSON path (or STYLELOOP_CONFIG)")
    p.add_argument("--workdir", default=None, help="base directory for relative paths")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distill", help="synthesize pseudo-pairs from source images")
    d.add_argument("--source-dir")
    d.add_argument("--out")
    d.add_argument("--client", choices=["stub", "remote"], default="stub")
    d.add_argument("--endpoint", default="")

    t = sub.add_parser("train", help="run the cycle-consistent training loop")
    t.add_argument("--manifest")
    t.add_argument("--mode", choices=["joint", "two_stage", "no_lora"], default=None)
    t.add_argument("--resume", default=None)

    for name in ("stylize", "destylize"):
        s = sub.add_parser(name, help=f"{name} images with a trained checkpoint")
        s.add_argument("--checkpoint")
        s.add_argument("--input", required=True)
        s.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="run the four-metric report")
    e.add_argument("--generated", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--source", required=True)
    e.add_argument("--out")

    r = sub.add_parser("separation-report", help="measure domain embedding separation")
    r.add_argument("--checkpoint")
    r.add_argument("--prompts-file")
    r.add_argument("--out")
    return p


def _workdir(args) -> Path:
    wd = args.workdir or os.environ.get(WORKDIR_ENV_VAR) or "."
    return Path(wd)


def _resolve(workdir: Path, p: str | Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else workdir / p


def _load_cfg(args) -> ExperimentConfig:
    path = resolve_config_path(args.config)
    if path is None:
        cfg = ExperimentConfig()
    else:
        cfg = load_config(_resolve(_workdir(args), path))
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_distill(args) -> CommandResult:
    cfg = _load_cfg(args)
    wd = _workdir(args)
    source_dir = _resolve(wd, args.source_dir or cfg.paths.source_dir)
    if not source_dir.is_dir():
        raise UsageError(f"source dir does not exist: {source_dir}")
    out_dir = _resolve(wd, args.out or Path(cfg.paths.manifest).parent)
    client = FrozenGeneratorClient(
        kind="local_stub" if args.client == "stub" else "remote_http",
        generator_id=args.client if args.client != "remote" else (args.endpoint or "remote"),
        endpoint=args.endpoint,
    )
    if client.kind == "remote_http" and not args.endpoint:
        raise UsageError("--endpoint is required with --client remote")
    job = DistillationJob(
        source_dir=str(source_dir),
        prompt_template=cfg.prompts.target_prompt,
        client=client,
        output_dir=str(out_dir),
        seed=cfg.seed,
        source_prompt=cfg.prompts.source_prompt,
        image_size=cfg.image_size,
    )
    manifest = distill(job)
    skips = json.loads((out_dir / "manifest.skips.json").read_text(encoding="utf-8"))
    print(f"{len(manifest.pairs)} pairs, {len(skips)} skipped")
    return CommandResult(
        0,
        [str(out_dir / "manifest.jsonl"), str(out_dir / "manifest.skips.json")],
        f"{len(manifest.pairs)} pairs",
    )


def cmd_train(args) -> CommandResult:
    cfg = _load_cfg(args)
    if args.mode:
        cfg.training_mode = args.mode
    wd = _workdir(args)
    manifest_path = _resolve(wd, args.manifest or cfg.paths.manifest)
    if not manifest_path.exists():
        raise UsageError(f"manifest not found: {manifest_path}")
    manifest = read_manifest(manifest_path)
    ckpt_dir = _resolve(wd, cfg.paths.checkpoints)
    resume = _resolve(wd, args.resume) if args.resume else None

    def log_fn(step, b):
        print(f"step {step}: total={b.total:.5f} cycle={b.cycle_l1:.5f} "
              f"perceptual={b.perceptual:.5f} separation={b.separation:.5f}")

    final = train(cfg, manifest, ckpt_dir, resume_from=resume, log_fn=log_fn)
    history = ckpt_dir / "loss_history.csv"
    last = read_history(history)[-1]
    return CommandResult(
        0, [str(final), str(history)], f"trained to step {last['step']}, total {last['total']:.5f}"
    )


def _load_models_for_inference(args, cfg: ExperimentConfig):
    wd = _workdir(args)
    ckpt = _resolve(wd, args.checkpoint or (Path(cfg.paths.checkpoints) / "final"))
    if not Path(ckpt).exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    models, state, meta = load_checkpoint(ckpt, cfg if args.config else None)
    return models, state, meta


def _conditioning(models, meta, domain: str) -> ConditioningEmbedding:
    cfg_snap = meta["config"]
    prompts = cfg_snap["prompts"]
    prompt = prompts["source_prompt"] if domain == "source" else prompts["target_prompt"]
    tokens = tokenize(prompt, int(cfg_snap["max_tokens"]))
    mode = meta["mode"]
    aset = None
    if mode != "no_lora":
        aset = (
            models.encoders.source_adapters if domain == "source" else models.encoders.target_adapters
        )
    with ad.no_grad():
        emb = encoder_forward(models.encoders, tokens, adapters=aset)
    return ConditioningEmbedding(emb.data, tokens.attention_mask, domain)


def _run_translation(args, domain: str) -> CommandResult:
    cfg = _load_cfg(args)
    wd = _workdir(args)
    models, _state, meta = _load_models_for_inference(args, cfg)
    size = int(meta["config"]["image_size"])
    cond = _conditioning(models, meta, domain)

    in_path = _resolve(wd, args.input)
    out_path = _resolve(wd, args.out)
    if in_path.is_dir():
        files = list_images(in_path)
        if not files:
            raise UsageError(f"no images in {in_path}")
        outs = [(f, out_path / f"{f.stem}.png") for f in files]
        out_path.mkdir(parents=True, exist_ok=True)
    elif in_path.exists():
        outs = [(in_path, out_path)]
    else:
        raise UsageError(f"input not found: {in_path}")

    from PIL import Image

    from .datasets import load_image

    written = []
    with ad.no_grad():
        for src, dst in outs:
            with Image.open(src) as im:
                orig_size = im.size
            x = load_image(src, size)
            y = translate_graph(
                models.generator, Tensor(x[None]), Tensor(cond.values), cond.attention_mask
            ).data[0]
            save_image(y, dst)
            if orig_size != (size, size):
                with Image.open(dst) as im:
                    im.resize(orig_size, Image.BILINEAR).save(dst, format="PNG")
            written.append(str(dst))
    verb = "stylized" if domain == "target" else "destylized"
    print(f"{verb} {len(written)} image(s)")
    return CommandResult(0, written, f"{verb} {len(written)} image(s)")


def cmd_stylize(args) -> CommandResult:
    return _run_translation(args, "target")


def cmd_destylize(args) -> CommandResult:
    return _run_translation(args, "source")


def cmd_evaluate(args) -> CommandResult:
    cfg = _load_cfg(args)
    wd = _workdir(args)
    for flag in ("generated", "reference", "source"):
        d = _resolve(wd, getattr(args, flag))
        if not d.is_dir():
            raise UsageError(f"--{flag} is not a directory: {d}")
    out_prefix = _resolve(wd, args.out or (Path(cfg.paths.outputs) / "report"))
    report = evaluate(
        _resolve(wd, args.generated),
        _resolve(wd, args.reference),
        _resolve(wd, args.source),
        image_size=cfg.image_size,
        out_prefix=out_prefix,
    )
    print(
        f"FID {report.fid:.4f}  SSIM {report.ssim_mean:.4f}  "
        f"LPIPS {report.lpips_mean:.4f}  CLIP-ae {report.clip_ae_mean:.4f}"
    )
    return CommandResult(
        0,
        [f"{out_prefix}.csv", f"{out_prefix}.json"],
        f"FID={report.fid:.4f} SSIM={report.ssim_mean:.4f}",
    )


def cmd_separation_report(args) -> CommandResult:
    cfg = _load_cfg(args)
    wd = _workdir(args)
    models, _state, meta = _load_models_for_inference(args, cfg)
    if args.prompts_file:
        pf = _resolve(wd, args.prompts_file)
        if not pf.exists():
            raise UsageError(f"prompts file not found: {pf}")
        text = pf.read_text(encoding="utf-8").strip()
        if not text:
            raise UsageError(f"prompts file is empty: {pf}")
        try:
            families = json.loads(text)
        except json.JSONDecodeError as e:
            raise UsageError(f"prompts file is not valid JSON: {e}")
        source_family = list(families.get("source", []))
        target_family = list(families.get("target", []))
    else:
        source_family = cfg.prompts.source_family()
        target_family = cfg.prompts.target_family()
    if not source_family or not target_family:
        raise RuntimeError("both prompt families must be non-empty")

    mode = meta["mode"]
    max_tokens = int(meta["config"]["max_tokens"])

    def embed_family(family, domain):
        aset = None
        if mode != "no_lora":
            aset = (
                models.encoders.source_adapters
                if domain == "source"
                else models.encoders.target_adapters
            )
        out = []
        with ad.no_grad():
            for prompt in family:
                tokens = tokenize(prompt, max_tokens)
                emb = encoder_forward(models.encoders, tokens, adapters=aset)
                out.append(ConditioningEmbedding(emb.data, tokens.attention_mask, domain))
        return out

    src_embs = embed_family(source_family, "source")
    tgt_embs = embed_family(target_family, "target")
    report = embedding_separation(src_embs, tgt_embs)

    out_prefix = _resolve(wd, args.out or (Path(cfg.paths.outputs) / "separation"))
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    json_path = Path(f"{out_prefix}.json")
    json_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")

    # 2-D projection for plotting: PCA over pooled embeddings
    pooled = np.stack([pool_embedding(e) for e in src_embs + tgt_embs])
    centered = pooled - pooled.mean(axis=0)
    _u, _s, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[:2].T
    scatter_path = Path(f"{out_prefix}_scatter.csv")
    with scatter_path.open("w", encoding="utf-8") as fh:
        fh.write("domain,prompt,x,y\n")
        labels = [("source", p) for p in source_family] + [("target", p) for p in target_family]
        for (domain, prompt), (x, y) in zip(labels, coords):
            fh.write(f'{domain},"{prompt}",{x:.6f},{y:.6f}\n')

    print(f"silhouette {report.silhouette:.4f}  between {report.mean_between:.4f}")
    return CommandResult(
        0,
        [str(json_path), str(scatter_path)],
        f"silhouette={report.silhouette:.4f}",
    )


_COMMANDS = {
    "distill": cmd_distill,
    "train": cmd_train,
    "stylize": cmd_stylize,
    "destylize": cmd_destylize,
    "evaluate": cmd_evaluate,
    "separation-report": cmd_separation_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    command = "?"
    try:
        args = parser.parse_args(argv)
        command = args.command
        result = _COMMANDS[args.command](args)
        missing = [a for a in result.artifacts if not Path(a).exists()]
        if missing:
            raise RuntimeError(f"declared artifacts missing: {missing}")
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        result = CommandResult(1, [], str(e))
    except (ConfigError, ManifestError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        result = CommandResult(1, [], str(e))
    except (TrainingError, CheckpointError, DistillationError, MetricsError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        result = CommandResult(2, [], str(e))
    print(
        json.dumps(
            {
                "command": command,
                "exit_code": result.exit_code,
                "artifacts": result.artifacts,
                "summary": result.summary,
            }
        )
    )
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
