"""Command-line surface: simulate, train, enhance, evaluate.

Every command persists its fully resolved configuration beside the artifacts
it writes, and identical arguments plus an identical seed reproduce identical
outputs bit for bit.

Exit codes: 0 success, 2 empty/unusable corpus or bad usage, 3 training
diverged (diagnostics written), 4 checkpoint/pipeline mismatch.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import torch

from . import codec_pipeline as cp
from . import metrics_eval as me
from . import training as tr
from . import vocoder_pipeline as vp
from .config import (
    ExperimentConfig,
    apply_desk_preset,
    load_config,
    save_resolved_config,
)
from .data_sim import DatasetManifest, build_manifest
from .errors import CheckpointMismatch, EmptyCorpus, TrainingDiverged
from .signal_core import read_wav, write_wav

EXIT_EMPTY = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4


@click.group()
def main():
    """Speech resynthesis toolkit: simulation, training, enhancement, evaluation."""


@main.command()
@click.option("--clean-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--noise-dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option(
    "--condition",
    type=click.Choice(["reverberant", "noisy_reverberant"]),
    default="reverberant",
    show_default=True,
)
@click.option("--seed", type=int, default=0, show_default=True)
def simulate(clean_dir, noise_dir, out_dir, condition, seed):
    """Degrade a clean corpus into a manifest of (clean, degraded) pairs."""
    if condition == "noisy_reverberant" and noise_dir is None:
        click.echo("error: --condition noisy_reverberant requires --noise-dir", err=True)
        sys.exit(EXIT_EMPTY)
    try:
        manifest = build_manifest(clean_dir, noise_dir, out_dir, condition, seed)
    except EmptyCorpus as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_EMPTY)
    save_resolved_config(
        {
            "command": "simulate",
            "clean_dir": str(Path(clean_dir).resolve()),
            "noise_dir": str(Path(noise_dir).resolve()) if noise_dir else None,
            "condition": condition,
            "seed": seed,
        },
        out_dir,
        name="simulate_config.yaml",
    )
    click.echo(f"{manifest.path} ({len(manifest.rows)} rows)")


def _experiment_config(pipeline, preset, config, epochs, batch_size, lr, seed, workers, loss, aux, arch):
    cfg = load_config(config) if config else ExperimentConfig()
    cfg.pipeline = pipeline
    if seed is not None:
        cfg.seed = seed
    if preset == "desk":
        apply_desk_preset(cfg)
    if epochs is not None:
        cfg.train.epochs = epochs
    if batch_size is not None:
        cfg.train.batch_size = batch_size
    if lr is not None:
        cfg.train.learning_rate = lr
    if workers is not None:
        cfg.train.workers = workers
    if loss is not None:
        if loss == "simultaneous":
            cfg.codec_enhancer.prediction = "simultaneous"
            cfg.codec_enhancer.loss = "ce"
        else:
            cfg.codec_enhancer.prediction = "layerwise"
            cfg.codec_enhancer.loss = loss
            if loss == "ce+entry+smooth":
                cfg.codec_enhancer.allow_combined_regularizers = True
    if aux is not None:
        if aux == "none":
            cfg.enhancer.aux_injection = "none"
        else:
            if cfg.enhancer.aux_injection == "none":
                cfg.enhancer.aux_injection = "bottleneck"
            cfg.enhancer.aux_features = aux
    if arch is not None:
        cfg.enhancer.enhancer_arch = arch
    cfg.validate()
    return cfg


def _pretrained_codec(cfg: ExperimentConfig, manifest: DatasetManifest, out_dir: Path, codec_checkpoint):
    if codec_checkpoint:
        ckpt = tr.load_checkpoint(codec_checkpoint, expected_pipeline="toy_codec")
        codec = cp.ToyCodec()
        codec.load_state_dict(ckpt.payload["model_state"])
        codec.eval()
        return codec
    click.echo("pretraining toy codec ...")
    torch.manual_seed(cfg.seed)
    codec = cp.ToyCodec()
    clean_paths = [manifest.resolve(r.clean_path) for r in manifest.split_rows("train")]
    cp.pretrain_toy_codec(
        codec,
        clean_paths,
        steps=cfg.codec_pretrain.steps,
        batch_size=cfg.codec_pretrain.batch_size,
        crop_seconds=cfg.codec_pretrain.crop_seconds,
        learning_rate=cfg.codec_pretrain.learning_rate,
        seed=cfg.seed,
        augment_prob=cfg.codec_pretrain.augment_prob,
    )
    tr.save_checkpoint(
        out_dir / "toy_codec.pt", "toy_codec", {"kind": "toy"}, codec.state_dict(), None, 0,
        cfg.codec_pretrain.to_dict(),
    )
    return codec


@main.command()
@click.option("--pipeline", type=click.Choice(["vocoder", "codec", "baseline"]), required=True)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--preset", type=click.Choice(["paper", "desk"]), default="paper", show_default=True)
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML experiment config; flags override it.")
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None, help="Data-loader parallelism cap.")
@click.option("--loss", type=click.Choice(["ce", "ce+entry", "ce+smooth", "ce+entry+smooth", "simultaneous"]),
              default=None, help="Codec-enhancer objective variant.")
@click.option("--aux", type=click.Choice(["lws", "last", "tokens", "none"]), default=None,
              help="Vocoder-route auxiliary input variant.")
@click.option("--arch", type=click.Choice(["dccrn", "transformer"]), default=None)
@click.option("--codec-checkpoint", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Reuse a pretrained toy codec instead of pretraining one.")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
def train(pipeline, manifest_path, out_dir, preset, config, epochs, batch_size, lr, seed,
          workers, loss, aux, arch, codec_checkpoint, resume):
    """Train an enhancer on a simulated manifest; writes checkpoint + loss CSV."""
    out = Path(out_dir)
    try:
        cfg = _experiment_config(pipeline, preset, config, epochs, batch_size, lr, seed, workers, loss, aux, arch)
        cfg.train.out_dir = str(out)
        manifest = DatasetManifest.load(manifest_path)
        save_resolved_config({"command": "train", "manifest": str(Path(manifest_path).resolve()),
                              **cfg.to_dict()}, out)
        if pipeline == "codec":
            codec = _pretrained_codec(cfg, manifest, out, codec_checkpoint)
            ckpt = cp.train_codec_enhancer(manifest, codec, cfg.codec_enhancer, cfg.train, resume_from=resume)
        else:
            ckpt = vp.train_vocoder(manifest, cfg.enhancer, cfg.train, resume_from=resume)
    except TrainingDiverged as exc:
        click.echo(f"error: {exc} (diagnostics: {exc.diagnostics_path})", err=True)
        sys.exit(EXIT_DIVERGED)
    except (EmptyCorpus,) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_EMPTY)
    except CheckpointMismatch as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISMATCH)
    click.echo(f"{ckpt.path} (epoch {ckpt.epoch})")


def _enhancement_system(pipeline: str, checkpoint: str):
    if pipeline == "codec":
        model, codec, ckpt = cp.load_codec_enhancer(checkpoint)
        return lambda w: cp.enhance_waveform_codec(w, model, codec)
    model, cfg, centroids, ckpt = vp.load_vocoder_model(checkpoint, pipeline=pipeline)
    return lambda w: vp.enhance_waveform_vocoder(w, model, cfg, centroids)


@main.command()
@click.option("--pipeline", type=click.Choice(["vocoder", "codec", "baseline"]), required=True)
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--input-dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--split", default="test", show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def enhance(pipeline, checkpoint, input_dir, manifest_path, split, out_dir):
    """Enhance a directory of wavs (or a manifest split); preserves basenames."""
    out = Path(out_dir)
    if (input_dir is None) == (manifest_path is None):
        click.echo("error: provide exactly one of --input-dir or --manifest", err=True)
        sys.exit(EXIT_EMPTY)
    try:
        system = _enhancement_system(pipeline, checkpoint)
    except CheckpointMismatch as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISMATCH)
    if input_dir is not None:
        sources = sorted(Path(input_dir).glob("*.wav"))
    else:
        manifest = DatasetManifest.load(manifest_path)
        sources = [manifest.resolve(r.degraded_path) for r in sorted(manifest.split_rows(split), key=lambda r: r.id)]
    if not sources:
        click.echo("error: no input wav files found", err=True)
        sys.exit(EXIT_EMPTY)
    out.mkdir(parents=True, exist_ok=True)
    for src in sources:
        enhanced = system(read_wav(src))
        write_wav(out / Path(src).name, enhanced)
    save_resolved_config(
        {"command": "enhance", "pipeline": pipeline, "checkpoint": str(Path(checkpoint).resolve()),
         "input_dir": str(Path(input_dir).resolve()) if input_dir else None,
         "manifest": str(Path(manifest_path).resolve()) if manifest_path else None, "split": split},
        out, name="enhance_config.yaml",
    )
    click.echo(f"{out} ({len(sources)} files)")


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--enhanced-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Scores these files against the clean references; omit to score the degraded inputs.")
@click.option("--split", default="test", show_default=True)
@click.option("--metrics", default="stoi", show_default=True, help="Comma-separated: stoi,pesq,dnsmos")
@click.option("--system-label", default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
def evaluate(manifest_path, enhanced_dir, split, metrics, system_label, out_path):
    """Score a system (or the unprocessed inputs) on a manifest split."""
    manifest = DatasetManifest.load(manifest_path)
    metric_list = [m.strip() for m in metrics.split(",") if m.strip()]
    label = system_label or (Path(enhanced_dir).name if enhanced_dir else "Unprocessed")
    try:
        if enhanced_dir is not None:
            # score the already-enhanced files: repoint degraded paths at them
            # and evaluate the identity system
            import copy

            manifest = copy.deepcopy(manifest)
            missing = []
            for row in manifest.rows:
                candidate = Path(enhanced_dir) / Path(row.degraded_path).name
                if row.split == split and not candidate.exists():
                    missing.append(str(candidate))
                row.degraded_path = str(candidate.resolve())
            if missing:
                raise EmptyCorpus(f"enhanced files missing: {missing[:3]} ...")
        report = me.evaluate_manifest(lambda w: w, manifest, metric_list, split, label)
    except EmptyCorpus as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_EMPTY)
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(report.to_json(), encoding="utf-8")
    click.echo(me.render_table([report]))


if __name__ == "__main__":
    main()
