"""texsds: text-to-texture optimization over a fixed mesh.

Pipeline: load and normalize a triangle mesh, optimize a hash-grid texture
field with depth-conditioned score distillation, bake the field to a UV
texture image, and export OBJ + MTL + PNG.
"""

__version__ = "0.1.0"

from .baker import BakedTexture, bake, export
from .config import JobConfig, load_config
from .errors import (
    BackendError,
    CheckpointError,
    ConfigError,
    MeshError,
    NumericError,
    ProtocolError,
    TexsdsError,
)
from .geometry import TriangleMesh, ensure_uv_atlas, load_mesh, normalize_mesh, prepare_mesh
from .guidance import (
    AnalyticBackend,
    GuidanceBackend,
    GuidanceConfig,
    analytic_backend,
    cfg_combine,
    sample_timestep,
    sds_gradient,
)
from .render import (
    CameraSample,
    DepthCondition,
    RenderOutput,
    prepare_depth_condition,
    render,
    sample_cameras,
)
from .texfield import FieldConfig, TextureField, init_field, load_field, save_field
from .trainer import (
    LossTrace,
    RunConfig,
    detect_convergence,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
)
from .wire import DiffusionBackend, diffusion_backend

__all__ = [
    "AnalyticBackend",
    "BackendError",
    "BakedTexture",
    "CameraSample",
    "CheckpointError",
    "ConfigError",
    "DepthCondition",
    "DiffusionBackend",
    "FieldConfig",
    "GuidanceBackend",
    "GuidanceConfig",
    "JobConfig",
    "LossTrace",
    "MeshError",
    "NumericError",
    "ProtocolError",
    "RenderOutput",
    "RunConfig",
    "TexsdsError",
    "TextureField",
    "TriangleMesh",
    "analytic_backend",
    "bake",
    "cfg_combine",
    "detect_convergence",
    "diffusion_backend",
    "ensure_uv_atlas",
    "export",
    "init_field",
    "load_checkpoint",
    "load_config",
    "load_field",
    "load_mesh",
    "normalize_mesh",
    "prepare_depth_condition",
    "prepare_mesh",
    "render",
    "run_ablation",
    "sample_cameras",
    "sample_timestep",
    "save_checkpoint",
    "save_field",
    "sds_gradient",
    "train",
]
