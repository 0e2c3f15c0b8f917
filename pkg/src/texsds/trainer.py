"""Optimization loop: camera batches, rendering, guidance, Adam, checkpoints.

Each step samples a camera batch, renders every view, prepares depth
conditioning, obtains the per-view SDS image gradients, averages the
resulting parameter gradients across views, and applies exactly one Adam
update. All stochastic draws come from counter-based streams keyed on
(seed, step), so a run resumed from a checkpoint continues bit-identically
to an uninterrupted one.
"""

import dataclasses
import hashlib
import io
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
import torch

from . import rng as rngmod
from .errors import BackendError, CheckpointError, ConfigError, NumericError
from .geometry import TriangleMesh
from .guidance import GuidanceBackend, GuidanceConfig, SdsStep, sds_gradient
from .render import (
    CameraSample,
    prepare_depth_condition,
    render,
    sample_cameras,
    turntable_cameras,
)
from .texfield import FieldConfig, TextureField, init_field

CHECKPOINT_MAGIC = b"TSK1"


@dataclass(frozen=True)
class RunConfig:
    batch_size: int = 8
    steps: int = 5000
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    render_resolution: int = 512
    elev_range: tuple[float, float] = (10.0, 80.0)
    dist_range: tuple[float, float] = (1.0, 1.5)
    fov_y: float = 40.0
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    guidance: GuidanceConfig = dc_field(default_factory=GuidanceConfig)
    grad_clip: float | None = None
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be > 0 when set")
        self.guidance.validate()


@dataclass
class LossTrace:
    losses: list[float] = dc_field(default_factory=list)
    millis: list[float] = dc_field(default_factory=list)
    checkpoints: list[int] = dc_field(default_factory=list)

    def __len__(self) -> int:
        return len(self.losses)


@dataclass
class TrainResult:
    field: TextureField
    trace: LossTrace
    optimizer: torch.optim.Adam


@contextmanager
def _single_threaded_torch():
    # the hash-table gather backward accumulates with index_put, whose
    # parallel CPU reduction order is not fixed; one thread keeps runs
    # bit-reproducible (and is faster at these tensor sizes anyway)
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(old)


def make_optimizer(field: TextureField, config: RunConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        field.parameters(),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )


def depth_condition_size(backend: GuidanceBackend, resolution: int) -> int:
    if backend.depth_size is not None:
        return backend.depth_size
    return max(8, resolution // 8)


def train_step(
    mesh: TriangleMesh,
    field: TextureField,
    backend: GuidanceBackend,
    config: RunConfig,
    optimizer: torch.optim.Adam,
    cameras: list[CameraSample],
    sds_rng: np.random.Generator,
    steps_override: list[SdsStep] | None = None,
) -> tuple[float, float]:
    """Run one optimization step over the given camera batch.

    Returns (loss proxy, post-clip parameter gradient norm). Per-view
    parameter gradients are averaged and a single optimizer update applied.
    """
    with _single_threaded_torch():
        return _train_step_impl(
            mesh, field, backend, config, optimizer, cameras, sds_rng, steps_override
        )


def _train_step_impl(
    mesh, field, backend, config, optimizer, cameras, sds_rng, steps_override
) -> tuple[float, float]:
    outputs = [
        render(mesh, field, cam, config.render_resolution, config.background)
        for cam in cameras
    ]
    images = torch.stack([o.rgb for o in outputs])  # (B, H, W, 3)
    dsize = depth_condition_size(backend, config.render_resolution)
    depths = np.stack([prepare_depth_condition(o, dsize).map for o in outputs])

    result = sds_gradient(
        backend,
        images.detach().cpu().numpy(),
        depths,
        config.guidance,
        sds_rng,
        steps=steps_override,
    )
    grad = torch.from_numpy(
        np.ascontiguousarray(result.grad_images, dtype=np.float64)
    ).to(images.dtype)

    optimizer.zero_grad(set_to_none=True)
    # dividing the injected gradient by the view count averages the
    # per-view parameter gradients before the single update
    torch.autograd.backward(images, grad_tensors=grad / len(cameras))

    params = [p for p in field.parameters()]
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericError("non-finite parameter gradient encountered")
    if config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
    norm_sq = 0.0
    for p in params:
        if p.grad is not None:
            norm_sq += float(p.grad.double().pow(2).sum())
    optimizer.step()

    if not np.isfinite(result.loss_proxy):
        raise NumericError("non-finite loss proxy")
    return result.loss_proxy, float(np.sqrt(norm_sq))


def train(
    mesh: TriangleMesh,
    field: TextureField | None,
    backend: GuidanceBackend,
    config: RunConfig,
    out_dir: str | os.PathLike | None = None,
    resume_from: str | os.PathLike | None = None,
) -> TrainResult:
    """Optimize the texture field for config.steps steps.

    With `resume_from`, the field, optimizer state, trace, and step counter
    are restored from the checkpoint and `field` may be None; the run then
    continues through the same draw streams it would have consumed
    uninterrupted. The input field is updated in place.
    """
    config.validate()
    start_step = 0
    trace = LossTrace()
    if resume_from is not None:
        state = load_checkpoint_state(resume_from)
        field = state.field
        trace = state.trace
        start_step = state.step
        optimizer = make_optimizer(field, config)
        _restore_optimizer(optimizer, state.optimizer_arrays)
    else:
        if field is None:
            raise ConfigError("either a field or resume_from is required")
        optimizer = make_optimizer(field, config)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for step in range(start_step, config.steps):
        t0 = time.perf_counter()
        cam_rng = rngmod.stream(config.seed, step, rngmod.CAMERAS)
        cameras = sample_cameras(
            cam_rng,
            config.batch_size,
            config.elev_range,
            config.dist_range,
            fov_y=config.fov_y,
        )
        sds_rng = rngmod.stream(config.seed, step, rngmod.SDS)
        try:
            loss, _ = train_step(
                mesh, field, backend, config, optimizer, cameras, sds_rng
            )
        except (BackendError, NumericError):
            if out_dir is not None:
                save_checkpoint(
                    field,
                    trace,
                    os.path.join(out_dir, "ckpt_abort.tsck"),
                    optimizer=optimizer,
                    step=step,
                )
            raise
        trace.losses.append(loss)
        trace.millis.append((time.perf_counter() - t0) * 1000.0)

        done = step + 1
        if (
            config.checkpoint_every > 0
            and out_dir is not None
            and (done % config.checkpoint_every == 0 or done == config.steps)
        ):
            path = os.path.join(out_dir, f"ckpt_{done:06d}.tsck")
            save_checkpoint(field, trace, path, optimizer=optimizer, step=done)
            trace.checkpoints.append(done)

    return TrainResult(field=field, trace=trace, optimizer=optimizer)


def detect_convergence(
    trace: LossTrace | list[float], window: int, rel_tol: float
) -> int | None:
    """First step count at which the windowed loss average stops improving.

    At step s >= window the last `window` losses are split in half; the run
    has converged once the second half's mean improves on the first half's
    by less than rel_tol relative. Returns None if that never happens.
    """
    if window < 2:
        raise ConfigError("window must be >= 2")
    losses = trace.losses if isinstance(trace, LossTrace) else list(trace)
    half = window // 2
    for s in range(window, len(losses) + 1):
        chunk = losses[s - window : s]
        m1 = float(np.mean(chunk[: window - half]))
        m2 = float(np.mean(chunk[window - half :]))
        improvement = 0.0 if m1 == m2 else (m1 - m2) / abs(m1) if abs(m1) > 0 else 0.0
        if improvement < rel_tol:
            return s
    return None


# -- checkpoints ---------------------------------------------------------------


@dataclass
class CheckpointState:
    field: TextureField
    trace: LossTrace
    optimizer_arrays: dict[str, np.ndarray]
    step: int


def _optimizer_arrays(optimizer: torch.optim.Adam | None) -> dict[str, np.ndarray]:
    if optimizer is None:
        return {}
    arrays: dict[str, np.ndarray] = {}
    sd = optimizer.state_dict()
    for idx, state in sd["state"].items():
        for key in ("step", "exp_avg", "exp_avg_sq"):
            val = state[key]
            if isinstance(val, torch.Tensor):
                arrays[f"adam.{idx}.{key}"] = val.detach().cpu().numpy().astype("<f4")
            else:
                arrays[f"adam.{idx}.{key}"] = np.asarray(val, dtype="<f4")
    return arrays


def _restore_optimizer(
    optimizer: torch.optim.Adam, arrays: dict[str, np.ndarray]
) -> None:
    if not arrays:
        return
    sd = optimizer.state_dict()
    state: dict[int, dict] = {}
    indices = sorted({int(k.split(".")[1]) for k in arrays})
    for idx in indices:
        state[idx] = {
            "step": torch.from_numpy(arrays[f"adam.{idx}.step"].copy()).reshape(()),
            "exp_avg": torch.from_numpy(arrays[f"adam.{idx}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam.{idx}.exp_avg_sq"].copy()),
        }
    sd["state"] = state
    optimizer.load_state_dict(sd)


def save_checkpoint(
    field: TextureField,
    trace: LossTrace,
    path: str | os.PathLike,
    optimizer: torch.optim.Adam | None = None,
    step: int | None = None,
) -> None:
    """Write field parameters, trace, and optimizer state with a checksum."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name, tensor in field.parameter_arrays():
        arrays.append((name, tensor.detach().cpu().numpy().astype("<f4")))
    for name, arr in _optimizer_arrays(optimizer).items():
        arrays.append((name, arr))

    header = {
        "field_config": dataclasses.asdict(field.config),
        "trace": {
            "losses": trace.losses,
            "millis": trace.millis,
            "checkpoints": trace.checkpoints,
        },
        "step": len(trace.losses) if step is None else step,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    hjson = json.dumps(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(len(hjson).to_bytes(8, "little"))
    buf.write(hjson)
    for _, arr in arrays:
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(digest)


def load_checkpoint_state(path: str | os.PathLike) -> CheckpointState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 44 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"checksum mismatch (corrupt or truncated): {path}")
    hlen = int.from_bytes(payload[4:12], "little")
    header = json.loads(payload[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen

    arrays: dict[str, np.ndarray] = {}
    for meta in header["arrays"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"truncated checkpoint payload: {path}")
        arrays[meta["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape)
        offset += nbytes

    config = FieldConfig(**header["field_config"])
    field = TextureField(config)
    with torch.no_grad():
        for name, tensor in field.parameter_arrays():
            if name not in arrays:
                raise CheckpointError(f"checkpoint missing array {name!r}")
            tensor.copy_(torch.from_numpy(arrays[name].copy()))

    trace = LossTrace(
        losses=list(header["trace"]["losses"]),
        millis=list(header["trace"]["millis"]),
        checkpoints=list(header["trace"]["checkpoints"]),
    )
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return CheckpointState(
        field=field, trace=trace, optimizer_arrays=opt_arrays, step=int(header["step"])
    )


def load_checkpoint(path: str | os.PathLike) -> tuple[TextureField, LossTrace]:
    state = load_checkpoint_state(path)
    return state.field, state.trace


def write_trace_csv(trace: LossTrace, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss,millis\n")
        for i, (loss, ms) in enumerate(zip(trace.losses, trace.millis)):
            fh.write(f"{i},{loss!r},{ms:.3f}\n")


# -- ablation sweeps -------------------------------------------------------------


@dataclass
class AblationRun:
    value: object
    run_dir: str
    trace: LossTrace
    checkpoint: str


@dataclass
class AblationReport:
    axis: str
    values: list
    runs: list[AblationRun]
    contact_sheet: str | None


def apply_axis(config: RunConfig, axis: str, value) -> RunConfig:
    """Return a copy of config with one RunConfig or GuidanceConfig field replaced."""
    run_fields = {f.name for f in dataclasses.fields(RunConfig)}
    guidance_fields = {f.name for f in dataclasses.fields(GuidanceConfig)}
    if axis in run_fields and axis != "guidance":
        if axis in ("elev_range", "dist_range"):
            value = tuple(float(v) for v in value)
        return replace(config, **{axis: value})
    if axis in guidance_fields:
        if axis == "t_range":
            value = tuple(float(v) for v in value)
        return replace(config, guidance=replace(config.guidance, **{axis: value}))
    raise ConfigError(f"unknown ablation axis {axis!r}")


def _slug(value) -> str:
    text = json.dumps(value) if isinstance(value, (list, tuple)) else str(value)
    return "".join(c if c.isalnum() or c in ".-" else "_" for c in text)[:40]


def _run_one_ablation(
    mesh: TriangleMesh,
    base: RunConfig,
    axis: str,
    value,
    backend: GuidanceBackend,
    field_config: FieldConfig,
    run_dir: str,
) -> AblationRun:
    os.makedirs(run_dir, exist_ok=True)
    ckpt = os.path.join(run_dir, "final.tsck")
    done_marker = os.path.join(run_dir, "done.json")
    config = apply_axis(base, axis, value)
    if os.path.exists(done_marker) and os.path.exists(ckpt):
        _, trace = load_checkpoint(ckpt)  # restartable: reuse the finished run
        return AblationRun(value=value, run_dir=run_dir, trace=trace, checkpoint=ckpt)
    field = init_field(field_config)
    result = train(mesh, field, backend, config, out_dir=run_dir)
    save_checkpoint(result.field, result.trace, ckpt, optimizer=result.optimizer)
    write_trace_csv(result.trace, os.path.join(run_dir, "trace.csv"))
    _write_ablation_snapshots(mesh, result.field, config, run_dir)
    with open(done_marker, "w", encoding="utf-8") as fh:
        json.dump({"axis": axis, "value": value, "steps": config.steps}, fh)
    return AblationRun(value=value, run_dir=run_dir, trace=result.trace, checkpoint=ckpt)


def _write_ablation_snapshots(mesh, field, config, run_dir, views: int = 4):
    from PIL import Image

    for i, cam in enumerate(turntable_cameras(views, fov_y=config.fov_y)):
        out = render(mesh, field, cam, config.render_resolution, config.background)
        arr = np.clip(np.rint(out.rgb.detach().numpy() * 255), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(run_dir, f"view_{i}.png"))


def run_ablation(
    base: RunConfig,
    axis: str,
    values: list,
    mesh: TriangleMesh,
    backend: GuidanceBackend,
    field_config: FieldConfig,
    out_dir: str | os.PathLike,
    parallel: int = 1,
) -> AblationReport:
    """One training run per axis value, sharing the base seed.

    Each run writes its trace, final checkpoint, and canonical-view
    snapshots under its own directory; finished runs are skipped on rerun.
    A side-by-side contact sheet covers all runs.
    """
    if not values:
        raise ConfigError("ablation needs at least one value")
    apply_axis(base, axis, values[0])  # validate the axis before any work
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    run_dirs = [
        os.path.join(out_dir, f"run_{axis}_{i}_{_slug(v)}") for i, v in enumerate(values)
    ]

    if parallel > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=parallel) as pool:
            runs = list(
                pool.map(
                    _run_one_ablation,
                    [mesh] * len(values),
                    [base] * len(values),
                    [axis] * len(values),
                    values,
                    [backend] * len(values),
                    [field_config] * len(values),
                    run_dirs,
                )
            )
    else:
        runs = [
            _run_one_ablation(mesh, base, axis, v, backend, field_config, d)
            for v, d in zip(values, run_dirs)
        ]

    sheet = _contact_sheet(runs, os.path.join(out_dir, "contact_sheet.png"))
    return AblationReport(axis=axis, values=list(values), runs=runs, contact_sheet=sheet)


def _contact_sheet(runs: list[AblationRun], path: str, views: int = 4) -> str | None:
    from PIL import Image

    tiles = []
    for run in runs:
        row = []
        for i in range(views):
            p = os.path.join(run.run_dir, f"view_{i}.png")
            if os.path.exists(p):
                row.append(Image.open(p))
        if row:
            tiles.append(row)
    if not tiles:
        return None
    w, h = tiles[0][0].size
    sheet = Image.new("RGB", (w * max(len(r) for r in tiles), h * len(tiles)))
    for r, row in enumerate(tiles):
        for c, img in enumerate(row):
            sheet.paste(img, (c * w, r * h))
    sheet.save(path)
    return path
