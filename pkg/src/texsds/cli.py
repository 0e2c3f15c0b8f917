"""Operator entry point: `texsds texture|ablate|preview|bake`.

Exit codes are disjoint and stable: 0 success, 2 configuration error,
3 mesh or checkpoint error, 4 guidance backend error, 5 numeric failure.
The TEXSDS_ENDPOINT environment variable supplies the diffusion service
address when --endpoint is not given.
"""

import functools
import json
import os
import sys

import click
import numpy as np

from . import baker
from .config import JobConfig, config_hash, load_config, serialize_config
from .errors import (
    BackendError,
    CheckpointError,
    ConfigError,
    MeshError,
    NumericError,
    TexsdsError,
)
from .geometry import prepare_mesh
from .guidance import AnalyticBackend, GuidanceBackend
from .render import render, save_render_snapshot, turntable_cameras
from .texfield import init_field
from .trainer import (
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
    write_trace_csv,
)
from .wire import DiffusionBackend

EXIT_CONFIG = 2
EXIT_MESH = 3
EXIT_BACKEND = 4
EXIT_NUMERIC = 5


def _exit_code(exc: TexsdsError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (MeshError, CheckpointError)):
        return EXIT_MESH
    if isinstance(exc, BackendError):
        return EXIT_BACKEND
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return 1


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TexsdsError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(_exit_code(exc))

    return wrapper


def _parse_color(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad color {text!r}, expected R,G,B") from exc
    if len(parts) != 3 or min(parts) < 0 or max(parts) > 1:
        raise ConfigError(f"bad color {text!r}, expected three values in [0,1]")
    return parts


def _make_backend(
    kind: str, endpoint: str | None, model_id: str, target_color: str, resolution: int
) -> GuidanceBackend:
    if kind == "analytic":
        color = _parse_color(target_color)
        target = np.full((resolution, resolution, 3), color, dtype=np.float64)
        return AnalyticBackend(target)
    endpoint = endpoint or os.environ.get("TEXSDS_ENDPOINT")
    if not endpoint:
        raise ConfigError("diffusion backend needs --endpoint or TEXSDS_ENDPOINT")
    backend = DiffusionBackend(endpoint, model_id)
    backend.connect()
    if backend.image_size != resolution:
        raise ConfigError(
            f"render resolution {resolution} does not match the service's "
            f"image size {backend.image_size}"
        )
    return backend


def _resolve_mesh_path(config_path: str, mesh_path: str) -> str:
    if os.path.isabs(mesh_path):
        return mesh_path
    return os.path.join(os.path.dirname(os.path.abspath(config_path)), mesh_path)


def _write_loss_plot(losses: list[float], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(losses, lw=0.8, label="per step")
    if len(losses) >= 20:
        k = min(50, max(2, len(losses) // 10))
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(k - 1, len(losses)), smooth, lw=1.6, label=f"{k}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("loss proxy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _write_manifest(out_dir: str, cfg: JobConfig, artifacts: list[str]) -> str:
    path = os.path.join(out_dir, "manifest.json")
    rel = [os.path.relpath(a, out_dir) for a in artifacts]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"config_hash": config_hash(cfg), "artifacts": sorted(rel)}, fh, indent=2)
        fh.write("\n")
    return path


@click.group()
def main():
    """Text-to-texture optimization over a fixed mesh."""


@main.command("texture")
@click.option("--config", "config_path", required=True, type=click.Path(), help="JSON config file.")
@click.option("--backend", "backend_kind", type=click.Choice(["analytic", "diffusion"]), default="analytic", show_default=True)
@click.option("--endpoint", default=None, help="Diffusion service address (or TEXSDS_ENDPOINT).")
@click.option("--model-id", default="sd-depth", show_default=True)
@click.option("--target-color", default="0.5,0.5,0.5", show_default=True, help="Analytic backend target color R,G,B.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@_handle_errors
def cmd_texture(config_path, backend_kind, endpoint, model_id, target_color, out_dir):
    """Run the full pipeline: load, optimize, bake, export."""
    cfg = load_config(config_path)
    mesh = prepare_mesh(
        _resolve_mesh_path(config_path, cfg.mesh.path),
        bake_resolution=cfg.bake.resolution,
        regenerate_uvs=cfg.mesh.regenerate_uvs,
    )
    field = init_field(cfg.field)
    backend = _make_backend(
        backend_kind, endpoint, model_id, target_color, cfg.render.resolution
    )
    os.makedirs(out_dir, exist_ok=True)

    result = train(mesh, field, backend, cfg.run_config(), out_dir=out_dir)

    artifacts = []
    ckpt = os.path.join(out_dir, "checkpoint.tsck")
    save_checkpoint(result.field, result.trace, ckpt, optimizer=result.optimizer)
    artifacts.append(ckpt)

    baked = baker.bake(mesh, result.field, cfg.bake.resolution, cfg.bake.dilation)
    exported = baker.export(mesh, baked, out_dir)
    artifacts.extend(exported.values())

    loss_csv = os.path.join(out_dir, "loss.csv")
    write_trace_csv(result.trace, loss_csv)
    artifacts.append(loss_csv)
    loss_png = os.path.join(out_dir, "loss.png")
    _write_loss_plot(result.trace.losses, loss_png)
    artifacts.append(loss_png)

    snap_dir = os.path.join(out_dir, "snapshots")
    os.makedirs(snap_dir, exist_ok=True)
    views = cfg.output.turntable_views
    for cam in turntable_cameras(views, fov_y=cfg.render.fov_y):
        out = render(mesh, result.field, cam, cfg.render.resolution, cfg.render.background)
        prefix = os.path.join(snap_dir, f"azim_{int(round(cam.azimuth)) % 360:03d}")
        artifacts.extend(save_render_snapshot(out, prefix))

    _write_manifest(out_dir, cfg, artifacts)
    click.echo(f"wrote {len(artifacts)} artifacts to {out_dir}")


def parse_axis_values(text: str) -> list:
    """Parse --values: semicolon-separated JSON items, or comma-separated scalars."""
    text = text.strip()
    if not text:
        raise ConfigError("--values must not be empty")
    if ";" in text or text.startswith("["):
        tokens = [t for t in text.split(";") if t.strip()]
    else:
        tokens = [t for t in text.split(",") if t.strip()]
    if not tokens:
        raise ConfigError("--values must not be empty")
    values = []
    for token in tokens:
        token = token.strip()
        try:
            values.append(json.loads(token))
        except json.JSONDecodeError:
            values.append(token)  # bare strings, e.g. weighting names
    return values


@main.command("ablate")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--axis", required=True, help="RunConfig or GuidanceConfig field name.")
@click.option("--values", "values_text", required=True, help='e.g. "10,50,100" or "[0,90];[10,80]"')
@click.option("--backend", "backend_kind", type=click.Choice(["analytic", "diffusion"]), default="analytic", show_default=True)
@click.option("--endpoint", default=None)
@click.option("--model-id", default="sd-depth", show_default=True)
@click.option("--target-color", default="0.5,0.5,0.5", show_default=True)
@click.option("--parallel", default=1, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_handle_errors
def cmd_ablate(config_path, axis, values_text, backend_kind, endpoint, model_id, target_color, parallel, out_dir):
    """Sweep one config axis, one training run per value."""
    cfg = load_config(config_path)
    values = parse_axis_values(values_text)
    mesh = prepare_mesh(
        _resolve_mesh_path(config_path, cfg.mesh.path),
        bake_resolution=cfg.bake.resolution,
        regenerate_uvs=cfg.mesh.regenerate_uvs,
    )
    backend = _make_backend(
        backend_kind, endpoint, model_id, target_color, cfg.render.resolution
    )
    report = run_ablation(
        cfg.run_config(), axis, values, mesh, backend, cfg.field, out_dir,
        parallel=parallel,
    )
    artifacts = [r.checkpoint for r in report.runs]
    if report.contact_sheet:
        artifacts.append(report.contact_sheet)
    _write_manifest(out_dir, cfg, artifacts)
    click.echo(f"{len(report.runs)} runs complete; contact sheet: {report.contact_sheet}")


@main.command("preview")
@click.argument("mesh_path", type=click.Path())
@click.argument("checkpoint_path", type=click.Path())
@click.option("--views", default=8, show_default=True, type=int)
@click.option("--resolution", default=512, show_default=True, type=int)
@click.option("--elevation", default=30.0, show_default=True, type=float)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_handle_errors
def cmd_preview(mesh_path, checkpoint_path, views, resolution, elevation, out_dir):
    """Render a trained checkpoint from evenly spaced azimuths."""
    if views < 1:
        raise ConfigError("--views must be >= 1")
    field, _ = load_checkpoint(checkpoint_path)
    mesh = prepare_mesh(mesh_path)
    os.makedirs(out_dir, exist_ok=True)
    for cam in turntable_cameras(views, elevation=elevation):
        out = render(mesh, field, cam, resolution)
        prefix = os.path.join(out_dir, f"preview_az{int(round(cam.azimuth)) % 360:03d}")
        save_render_snapshot(out, prefix)
    click.echo(f"wrote {views} preview views to {out_dir}")


@main.command("bake")
@click.option("--mesh", "mesh_path", required=True, type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--resolution", default=512, show_default=True, type=int)
@click.option("--regenerate-uvs", is_flag=True, default=False)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_handle_errors
def cmd_bake(mesh_path, checkpoint_path, resolution, regenerate_uvs, out_dir):
    """Bake a trained checkpoint to OBJ + MTL + PNG."""
    field, _ = load_checkpoint(checkpoint_path)
    mesh = prepare_mesh(mesh_path, bake_resolution=resolution, regenerate_uvs=regenerate_uvs)
    baked = baker.bake(mesh, field, resolution)
    exported = baker.export(mesh, baked, out_dir)
    click.echo(f"baked texture to {exported['texture']}")


if __name__ == "__main__":
    main()
