"""JSON configuration files.

One document with sections {mesh, field, render, guidance, train, bake,
output}. Absent keys take the package defaults; unknown sections or keys
are rejected by name. Parsing then re-serializing is value-identical.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field as dc_field

from .errors import ConfigError
from .guidance import GuidanceConfig
from .texfield import FieldConfig
from .trainer import RunConfig

_TUPLE_KEYS = {"t_range", "elev_range", "dist_range", "background"}


@dataclass(frozen=True)
class MeshConfig:
    path: str = "model.obj"
    regenerate_uvs: bool = False


@dataclass(frozen=True)
class RenderSettings:
    resolution: int = 512
    fov_y: float = 40.0
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 8
    steps: int = 5000
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    elev_range: tuple[float, float] = (10.0, 80.0)
    dist_range: tuple[float, float] = (1.0, 1.5)
    grad_clip: float | None = None
    seed: int = 0
    checkpoint_every: int = 0


@dataclass(frozen=True)
class BakeConfig:
    resolution: int = 512
    dilation: int = 4


@dataclass(frozen=True)
class OutputConfig:
    turntable_views: int = 8


@dataclass(frozen=True)
class JobConfig:
    mesh: MeshConfig = dc_field(default_factory=MeshConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    render: RenderSettings = dc_field(default_factory=RenderSettings)
    guidance: GuidanceConfig = dc_field(default_factory=GuidanceConfig)
    train: TrainSettings = dc_field(default_factory=TrainSettings)
    bake: BakeConfig = dc_field(default_factory=BakeConfig)
    output: OutputConfig = dc_field(default_factory=OutputConfig)

    def run_config(self) -> RunConfig:
        """Assemble the trainer configuration from the file sections."""
        t = self.train
        return RunConfig(
            batch_size=t.batch_size,
            steps=t.steps,
            learning_rate=t.learning_rate,
            adam_beta1=t.adam_beta1,
            adam_beta2=t.adam_beta2,
            adam_eps=t.adam_eps,
            render_resolution=self.render.resolution,
            elev_range=t.elev_range,
            dist_range=t.dist_range,
            fov_y=self.render.fov_y,
            background=self.render.background,
            guidance=self.guidance,
            grad_clip=t.grad_clip,
            seed=t.seed,
            checkpoint_every=t.checkpoint_every,
        )


_SECTIONS = {
    "mesh": MeshConfig,
    "field": FieldConfig,
    "render": RenderSettings,
    "guidance": GuidanceConfig,
    "train": TrainSettings,
    "bake": BakeConfig,
    "output": OutputConfig,
}


def _build_section(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = [k for k in data if k not in names]
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in section {section!r}")
    kwargs = {}
    for name in names:
        if name not in data:
            continue
        value = data[name]
        if name in _TUPLE_KEYS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{section}.{name} must be an array")
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in section {section!r}: {exc}") from exc


def parse_config(doc: dict) -> JobConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = [k for k in doc if k not in _SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section {unknown[0]!r}")
    sections = {
        name: _build_section(cls, doc.get(name, {}), name)
        for name, cls in _SECTIONS.items()
    }
    cfg = JobConfig(**sections)
    cfg.guidance.validate()
    cfg.field.validate()
    cfg.run_config().validate()
    return cfg


def load_config(path: str | os.PathLike) -> JobConfig:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc)


def serialize_config(cfg: JobConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    return json.loads(json.dumps(doc))  # tuples become plain lists


def save_config(cfg: JobConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(serialize_config(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg: JobConfig) -> str:
    canonical = json.dumps(serialize_config(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
