import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from texsds.geometry import ensure_uv_atlas, load_mesh, normalize_mesh
from texsds.guidance import AnalyticBackend, GuidanceConfig
from texsds.texfield import FieldConfig, init_field
from texsds.trainer import RunConfig, save_checkpoint, train

CUBE_OBJ = """\
# unit cube, quads
v 0 0 0
v 2 0 0
v 2 2 0
v 0 2 0
v 0 0 2
v 2 0 2
v 2 2 2
v 0 2 2
f 1 2 3 4
f 5 8 7 6
f 1 5 6 2
f 2 6 7 3
f 3 7 8 4
f 4 8 5 1
"""

# same cube with a simple non-overlapping per-face UV layout (4x2 grid)
CUBE_OBJ_WITH_UV = """\
v 0 0 0
v 2 0 0
v 2 2 0
v 0 2 0
v 0 0 2
v 2 0 2
v 2 2 2
v 0 2 2
vt 0.01 0.01
vt 0.24 0.01
vt 0.24 0.49
vt 0.01 0.49
vt 0.26 0.01
vt 0.49 0.01
vt 0.49 0.49
vt 0.26 0.49
vt 0.51 0.01
vt 0.74 0.01
vt 0.74 0.49
vt 0.51 0.49
vt 0.76 0.01
vt 0.99 0.01
vt 0.99 0.49
vt 0.76 0.49
vt 0.01 0.51
vt 0.24 0.51
vt 0.24 0.99
vt 0.01 0.99
vt 0.26 0.51
vt 0.49 0.51
vt 0.49 0.99
vt 0.26 0.99
f 1/1 2/2 3/3 4/4
f 5/5 8/6 7/7 6/8
f 1/9 5/10 6/11 2/12
f 2/13 6/14 7/15 3/16
f 3/17 7/18 8/19 4/20
f 4/21 8/22 5/23 1/24
"""


def write_cube_obj(path, with_uv: bool = False) -> str:
    text = CUBE_OBJ_WITH_UV if with_uv else CUBE_OBJ
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return str(path)


@pytest.fixture(scope="session")
def cube_obj_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("meshes") / "cube.obj"
    return write_cube_obj(path)


@pytest.fixture(scope="session")
def cube_mesh(cube_obj_path):
    """Normalized cube with a generated atlas."""
    return ensure_uv_atlas(normalize_mesh(load_mesh(cube_obj_path)))


@pytest.fixture()
def small_field_config():
    return FieldConfig(
        num_levels=4,
        log2_table_size=11,
        base_resolution=16,
        finest_resolution=64,
        mlp_hidden_width=16,
        mlp_hidden_layers=2,
        seed=11,
    )


ANALYTIC_TARGET_COLOR = (0.25, 0.55, 0.80)
ANALYTIC_RUN_STEPS = 300
ANALYTIC_RUN_RESOLUTION = 64
ANALYTIC_RUN_BATCH = 4


@pytest.fixture(scope="session")
def analytic_run(cube_mesh, tmp_path_factory):
    """Shared end-to-end convergence run on the analytic oracle.

    Trains a reduced field on the cube toward a solid color for 300 steps
    and exposes the trained field, trace, config, and a saved checkpoint.
    """
    target = np.full(
        (ANALYTIC_RUN_RESOLUTION, ANALYTIC_RUN_RESOLUTION, 3), ANALYTIC_TARGET_COLOR
    )
    backend = AnalyticBackend(target)
    field_config = FieldConfig(
        num_levels=8,
        log2_table_size=13,
        base_resolution=16,
        finest_resolution=128,
        mlp_hidden_width=32,
        mlp_hidden_layers=2,
        seed=42,
    )
    run_config = RunConfig(
        batch_size=ANALYTIC_RUN_BATCH,
        steps=ANALYTIC_RUN_STEPS,
        learning_rate=0.01,
        render_resolution=ANALYTIC_RUN_RESOLUTION,
        guidance=GuidanceConfig(),
        seed=42,
    )
    result = train(cube_mesh, init_field(field_config), backend, run_config)
    ckpt = tmp_path_factory.mktemp("run") / "analytic.tsck"
    save_checkpoint(result.field, result.trace, ckpt, optimizer=result.optimizer)
    return {
        "mesh": cube_mesh,
        "field": result.field,
        "trace": result.trace,
        "target_color": ANALYTIC_TARGET_COLOR,
        "field_config": field_config,
        "run_config": run_config,
        "backend": backend,
        "checkpoint": str(ckpt),
    }
