"""Command-line pipeline: generate, pretrain, probe, cluster, report.

Each command reads its inputs from flags, resolves a configuration
(file, flag overrides, defaults), writes every artifact into one output
directory, and freezes the resolved config there so the run can be
reproduced from that copy alone.  One command per process; commands
communicate only through files.
"""

import os

# BLAS pools size themselves from these variables once at library load,
# so the cap has to land before the first numpy import below.
_threads = os.environ.get("EGOCLUST_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(_var, _threads)

import csv
import dataclasses
import json
from pathlib import Path

import click

from . import __version__
from . import config as config_mod
from .checkpoint import CheckpointError
from .data import ImageSequence, generate_synthetic, load_directory, save_sequence, split, write_split
from .evaluate import (
    extract_features,
    pca_project,
    probe_from_images,
    write_metrics_json,
    write_probe_json,
    write_projection_csv,
)
from .events import align_to_ground_truth, segment_events, write_alignment_json, write_manifest
from .train import BRANCH_MODES, CmNet, TrainingDiverged, load_encoder, train

_CONFIG_NAME = "run_config.toml"


def _prepare_out(out_dir, force: bool) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise click.ClickException(f"output directory {out} is not empty; pass --force to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(config_path, checkpoint=None, overrides=None) -> config_mod.RunConfig:
    if config_path is None and checkpoint is not None:
        sibling = Path(checkpoint).parent / _CONFIG_NAME
        if sibling.is_file():
            config_path = sibling
    try:
        return config_mod.load_run_config(config_path, overrides)
    except config_mod.ConfigError as exc:
        raise click.ClickException(str(exc)) from None


def _load_encoder_or_fail(cfg: config_mod.RunConfig, ckpt_path):
    try:
        return load_encoder(cfg.encoder, ckpt_path)
    except CheckpointError as exc:
        raise click.ClickException(f"cannot load encoder from {ckpt_path}: {exc}") from None


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Self-supervised event clustering for egocentric image streams."""


@main.command()
@click.option(
    "--spec",
    "spec_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="TOML file with a [synthetic] section.",
)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--force", is_flag=True, help="Allow writing into a non-empty directory.")
def generate(spec_path: Path, seed: int, out_dir: Path, force: bool) -> None:
    """Render a synthetic labeled stream as PNG frames plus a manifest."""
    try:
        spec = config_mod.load_synthetic_spec(spec_path)
    except config_mod.ConfigError as exc:
        raise click.ClickException(str(exc)) from None
    out = _prepare_out(out_dir, force)
    seq = generate_synthetic(spec, seed=seed)
    manifest = save_sequence(seq, out)
    config_mod.write_synthetic_spec(spec, seed, out / _CONFIG_NAME)
    click.echo(f"wrote {len(seq)} frames and {manifest.name} to {out}")


@main.command()
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Run config TOML; defaults apply when omitted.",
)
@click.option(
    "--data",
    "data_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option(
    "--branch",
    type=click.Choice(BRANCH_MODES),
    default=None,
    help="Objective variant; overrides the config file.",
)
@click.option("--seed", type=int, default=None, help="Overrides [train].seed.")
@click.option("--epochs", type=int, default=None, help="Overrides [train].epochs.")
@click.option("--force", is_flag=True)
def pretrain(config_path, data_dir, out_dir, branch, seed, epochs, force) -> None:
    """Pretrain the two-branch network; writes checkpoint and loss log."""
    overrides = {"train": {"branch": branch, "seed": seed, "epochs": epochs}}
    cfg = _resolve_config(config_path, overrides=overrides)
    seq = load_directory(data_dir)
    out = _prepare_out(out_dir, force)
    config_mod.write_run_config(cfg, out / _CONFIG_NAME)
    net = CmNet(cfg.encoder, decoder=cfg.decoder, seed=cfg.train.seed, channels=cfg.channels)
    try:
        result = train(seq.images(), net, cfg.train, out, policy=cfg.augment)
    except TrainingDiverged as exc:
        raise click.ClickException(f"training diverged: {exc}") from None
    final = result.epoch_means[-1]
    click.echo(
        f"{result.epochs_run} epochs (branch {cfg.train.branch}); "
        f"final mean joint loss {final:.6f}; checkpoint {Path(result.checkpoint).name}"
    )


@main.command()
@click.option(
    "--checkpoint",
    "ckpt_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Defaults to run_config.toml next to the checkpoint.",
)
@click.option(
    "--data",
    "data_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option(
    "--split",
    "split_mode",
    type=click.Choice(("shared", "disjoint")),
    default="shared",
    show_default=True,
    help="Whether probe frames may also appear in pretraining pools.",
)
@click.option("--ratio", type=float, default=0.8, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--force", is_flag=True)
def probe(ckpt_path, config_path, data_dir, split_mode, ratio, out_dir, force) -> None:
    """Linear-probe a frozen encoder on labeled frames."""
    cfg = _resolve_config(config_path, checkpoint=ckpt_path)
    encoder = _load_encoder_or_fail(cfg, ckpt_path)
    seq = load_directory(data_dir)
    try:
        parts = split([seq], mode=split_mode, ratio=ratio, seed=cfg.probe.seed)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from None
    out = _prepare_out(out_dir, force)
    config_mod.write_run_config(cfg, out / _CONFIG_NAME)
    write_split(parts, out / "split.json")
    result = probe_from_images(
        ImageSequence(parts.probe_train),
        ImageSequence(parts.probe_test),
        encoder,
        cfg.probe,
    )
    write_probe_json(result, out / "probe_result.json")
    click.echo(
        f"top-1 accuracy {result.top1:.4f} on {len(parts.probe_test)} held-out frames "
        f"({len(result.classes)} classes)"
    )


@main.command()
@click.option(
    "--checkpoint",
    "ckpt_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Defaults to run_config.toml next to the checkpoint.",
)
@click.option(
    "--data",
    "data_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option(
    "--params",
    "params_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="TOML with a [segment] section layered over the run config.",
)
@click.option("--theta", type=float, default=None, help="Cut threshold override.")
@click.option("--window", type=int, default=None, help="Smoothing window override.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--force", is_flag=True)
def cluster(ckpt_path, config_path, data_dir, params_path, theta, window, out_dir, force) -> None:
    """Encode a stream, cut it into events; writes manifest, metrics, projection."""
    cfg = _resolve_config(config_path, checkpoint=ckpt_path)
    params = cfg.segment
    if params_path is not None:
        try:
            params = config_mod.load_segment_params(params_path, base=params)
        except config_mod.ConfigError as exc:
            raise click.ClickException(str(exc)) from None
    updates = {k: v for k, v in (("theta", theta), ("window", window)) if v is not None}
    if updates:
        try:
            params = dataclasses.replace(params, **updates)
        except ValueError as exc:
            raise click.ClickException(str(exc)) from None
    encoder = _load_encoder_or_fail(cfg, ckpt_path)
    seq = load_directory(data_dir)
    out = _prepare_out(out_dir, force)
    config_mod.write_run_config(dataclasses.replace(cfg, segment=params), out / _CONFIG_NAME)

    feats = extract_features(seq, encoder)
    manifest = segment_events(feats, params)
    write_manifest(manifest, out / "events.jsonl")
    proj = pca_project(feats, dims=2)
    write_projection_csv(feats, proj, out / "projection.csv")
    if seq.labeled:
        aligned = align_to_ground_truth(manifest, seq)
        write_alignment_json(aligned, out / "alignment.json")
        write_metrics_json(aligned.metrics, out / "metrics.json")
        click.echo(
            f"{manifest.n_events} events over {len(manifest)} frames; "
            f"ARI {aligned.metrics['ari']:.4f}, agreement {aligned.agreement:.4f}"
        )
    else:
        click.echo(f"{manifest.n_events} events over {len(manifest)} frames")


# files a run directory may contain, in report order; report outputs are
# deliberately absent so regeneration is byte-stable
_ARTIFACTS = (
    "run_config.toml",
    "manifest.jsonl",
    "loss_log.jsonl",
    "cmnet.ckpt",
    "cmnet.ckpt.manifest",
    "split.json",
    "probe_result.json",
    "events.jsonl",
    "events.jsonl.events.json",
    "projection.csv",
    "alignment.json",
    "metrics.json",
)


def _epoch_rows(log_path: Path) -> list:
    sums: dict = {}
    with open(log_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            bucket = sums.setdefault(rec["epoch"], {"n": 0, "l_mae": 0.0, "l_con": 0.0, "joint": 0.0})
            bucket["n"] += 1
            for key in ("l_mae", "l_con", "joint"):
                bucket[key] += rec[key]
            bucket["lr"] = rec["lr"]
    rows = []
    for epoch in sorted(sums):
        b = sums[epoch]
        rows.append(
            {
                "epoch": epoch,
                "batches": b["n"],
                "l_mae": b["l_mae"] / b["n"],
                "l_con": b["l_con"] / b["n"],
                "joint": b["joint"] / b["n"],
                "lr": b["lr"],
            }
        )
    return rows


@main.command()
@click.option(
    "--run-dir",
    "run_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
def report(run_dir: Path) -> None:
    """Summarize a run directory as report.md plus loss_summary.csv."""
    run = Path(run_dir)
    snapshots = sorted(p.name for p in run.glob("cmnet_epoch*.ckpt"))
    present = [name for name in _ARTIFACTS if (run / name).is_file()]
    if not present and not snapshots:
        raise click.ClickException(f"no run artifacts found in {run}")

    lines = [f"# Run report: {run.name}", ""]

    rows = _epoch_rows(run / "loss_log.jsonl") if (run / "loss_log.jsonl").is_file() else []
    if rows:
        with open(run / "loss_summary.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "batches", "l_mae", "l_con", "joint", "lr"])
            for r in rows:
                writer.writerow(
                    [r["epoch"], r["batches"]]
                    + [repr(float(r[k])) for k in ("l_mae", "l_con", "joint", "lr")]
                )
        first, last = rows[0], rows[-1]
        lines += [
            "## Training",
            "",
            f"- epochs logged: {len(rows)}",
            f"- first epoch mean joint loss: {first['joint']:.6f}",
            f"- last epoch mean joint loss: {last['joint']:.6f}",
            f"- final learning rate: {last['lr']:.3g}",
            "- per-epoch means: [loss_summary.csv](loss_summary.csv)",
            "",
        ]

    probe_path = run / "probe_result.json"
    if probe_path.is_file():
        payload = json.loads(probe_path.read_text())
        per_class = ", ".join(f"{k}: {v:.3f}" for k, v in sorted(payload["per_class"].items()))
        lines += [
            "## Linear probe",
            "",
            f"- top-1 accuracy: {payload['top1']:.4f}",
            f"- classes: {len(payload['classes'])}",
            f"- per-class accuracy: {per_class}",
            "",
        ]

    metrics_path = run / "metrics.json"
    align_path = run / "alignment.json"
    if metrics_path.is_file() or align_path.is_file():
        lines += ["## Clustering", ""]
        if metrics_path.is_file():
            metrics = json.loads(metrics_path.read_text())
            lines += [f"- {name}: {metrics[name]:.4f}" for name in sorted(metrics)]
        if align_path.is_file():
            aligned = json.loads(align_path.read_text())
            lines += [
                f"- frame agreement: {aligned['agreement']:.4f}",
                f"- misaligned frames: {len(aligned['misaligned'])}",
            ]
        lines.append("")

    lines += ["## Artifacts", ""]
    for name in present:
        lines.append(f"- [{name}]({name}) ({(run / name).stat().st_size} bytes)")
    for name in snapshots:
        lines.append(f"- [{name}]({name}) ({(run / name).stat().st_size} bytes)")
    lines.append("")

    (run / "report.md").write_text("\n".join(lines), encoding="utf-8")
    click.echo(f"wrote {run / 'report.md'}")


if __name__ == "__main__":
    main()
