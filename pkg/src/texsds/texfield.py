"""Trainable implicit texture: multi-resolution hash grid plus a small MLP.

The field maps 3D surface positions of the normalized mesh (inside
[-1, 1]^3) to RGB in [0, 1]^3 and is the only trainable object in the
pipeline. Level geometry follows the usual multiresolution construction:
level l has resolution floor(base * b^l) with growth factor
b = exp(ln(finest / base) / (L - 1)).
"""

import io
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigError

HASH_PRIMES = (1, 2654435761, 805459861)

FIELD_MAGIC = b"TXF1"


@dataclass(frozen=True)
class FieldConfig:
    num_levels: int = 16
    features_per_level: int = 2
    log2_table_size: int = 19
    base_resolution: int = 16
    finest_resolution: int = 2048
    mlp_hidden_width: int = 64
    mlp_hidden_layers: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.num_levels < 1:
            raise ConfigError("num_levels must be >= 1")
        if self.features_per_level < 1:
            raise ConfigError("features_per_level must be >= 1")
        if self.log2_table_size < 1:
            raise ConfigError("log2_table_size must be >= 1")
        if self.base_resolution < 1:
            raise ConfigError("base_resolution must be >= 1")
        if self.finest_resolution < self.base_resolution:
            raise ConfigError("finest_resolution must be >= base_resolution")
        if self.mlp_hidden_width < 1 or self.mlp_hidden_layers < 0:
            raise ConfigError("invalid MLP dimensions")

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def encoding_dim(self) -> int:
        return self.num_levels * self.features_per_level

    @property
    def growth_factor(self) -> float:
        if self.num_levels == 1:
            return 1.0
        return math.exp(
            math.log(self.finest_resolution / self.base_resolution)
            / (self.num_levels - 1)
        )

    def level_resolution(self, level: int) -> int:
        return int(math.floor(self.base_resolution * self.growth_factor**level))

    def parameter_count(self) -> int:
        """Analytic total parameter count for this configuration."""
        total = self.num_levels * self.table_size * self.features_per_level
        dims = (
            [self.encoding_dim]
            + [self.mlp_hidden_width] * self.mlp_hidden_layers
            + [3]
        )
        for din, dout in zip(dims[:-1], dims[1:]):
            total += din * dout + dout
        return total


def hash_corner_index(coords: torch.Tensor, log2_table_size: int) -> torch.Tensor:
    """Spatial hash of integer lattice coordinates.

    coords: (..., 3) integer tensor. Returns (...,) int64 indices in
    [0, 2^log2_table_size), computed as
    (x * 1) XOR (y * 2654435761) XOR (z * 805459861) masked to table size.
    """
    coords = coords.to(torch.int64)
    h = coords[..., 0] * HASH_PRIMES[0]
    h = torch.bitwise_xor(h, coords[..., 1] * HASH_PRIMES[1])
    h = torch.bitwise_xor(h, coords[..., 2] * HASH_PRIMES[2])
    return torch.bitwise_and(h, (1 << log2_table_size) - 1)


# Offsets of the 8 cell corners, ordered x-minor for reproducibility.
_CORNER_OFFSETS = torch.tensor(
    [[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=torch.int64
)


class TextureField(nn.Module):
    """Hash-grid encoded color field with sigmoid-bounded RGB output."""

    def __init__(self, config: FieldConfig):
        config.validate()
        super().__init__()
        self.config = config
        gen = torch.Generator()
        gen.manual_seed(config.seed)
        tables = torch.empty(
            config.num_levels, config.table_size, config.features_per_level
        )
        # near-zero init keeps the initial texture mid-gray through the sigmoid
        tables.uniform_(-1e-4, 1e-4, generator=gen)
        self.level_tables = nn.Parameter(tables)

        dims = (
            [config.encoding_dim]
            + [config.mlp_hidden_width] * config.mlp_hidden_layers
            + [3]
        )
        layers = []
        for din, dout in zip(dims[:-1], dims[1:]):
            linear = nn.Linear(din, dout)
            bound = 1.0 / math.sqrt(din)
            with torch.no_grad():
                linear.weight.uniform_(-bound, bound, generator=gen)
                linear.bias.uniform_(-bound, bound, generator=gen)
            layers.append(linear)
        self.mlp = nn.ModuleList(layers)
        self._resolutions = [
            config.level_resolution(l) for l in range(config.num_levels)
        ]

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def corner_indices(self, points: torch.Tensor) -> list[torch.Tensor]:
        """Hash-table indices touched by each query point, one (N, 8) tensor per level."""
        x01 = ((points + 1.0) * 0.5).clamp(0.0, 1.0)
        out = []
        for level, res in enumerate(self._resolutions):
            scaled = x01 * res
            cell = torch.clamp(scaled.floor().to(torch.int64), max=res - 1)
            corners = cell.unsqueeze(1) + _CORNER_OFFSETS.to(cell.device).unsqueeze(0)
            out.append(hash_corner_index(corners, self.config.log2_table_size))
        return out

    def hash_encode(self, points: torch.Tensor) -> torch.Tensor:
        """Concatenated trilinear hash-grid features for points in [-1, 1]^3.

        Components outside the box are clamped. Output shape is
        (N, num_levels * features_per_level).
        """
        dtype = self.level_tables.dtype
        x01 = ((points.to(dtype) + 1.0) * 0.5).clamp(0.0, 1.0)
        feats = []
        for level, res in enumerate(self._resolutions):
            scaled = x01 * res
            cell = torch.clamp(scaled.floor().to(torch.int64), max=res - 1)
            frac = (scaled - cell.to(dtype)).clamp(0.0, 1.0)
            corners = cell.unsqueeze(1) + _CORNER_OFFSETS.to(cell.device).unsqueeze(0)
            idx = hash_corner_index(corners, self.config.log2_table_size)  # (N, 8)
            corner_feats = self.level_tables[level][idx]  # (N, 8, F)
            ox = _CORNER_OFFSETS[:, 0].to(dtype)
            oy = _CORNER_OFFSETS[:, 1].to(dtype)
            oz = _CORNER_OFFSETS[:, 2].to(dtype)
            wx = frac[:, 0:1] * ox + (1 - frac[:, 0:1]) * (1 - ox)
            wy = frac[:, 1:2] * oy + (1 - frac[:, 1:2]) * (1 - oy)
            wz = frac[:, 2:3] * oz + (1 - frac[:, 2:3]) * (1 - oz)
            weights = (wx * wy * wz).unsqueeze(-1)  # (N, 8, 1)
            feats.append((corner_feats * weights).sum(dim=1))
        return torch.cat(feats, dim=-1)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        h = self.hash_encode(points)
        for layer in self.mlp[:-1]:
            h = torch.relu(layer(h))
        return torch.sigmoid(self.mlp[-1](h))

    def query(self, points: torch.Tensor) -> torch.Tensor:
        """RGB in [0, 1]^3 for a (N, 3) batch of positions."""
        return self(points)

    def parameter_arrays(self) -> list[tuple[str, torch.Tensor]]:
        """Parameters in the fixed serialization order: tables, then MLP layers."""
        out = [("level_tables", self.level_tables)]
        for i, layer in enumerate(self.mlp):
            out.append((f"mlp.{i}.weight", layer.weight))
            out.append((f"mlp.{i}.bias", layer.bias))
        return out


def init_field(config: FieldConfig) -> TextureField:
    """Construct a field with seed-deterministic near-zero initialization."""
    return TextureField(config)


def save_field(field: TextureField, path: str | os.PathLike) -> None:
    """Write the field as a config header plus raw little-endian float32 arrays."""
    with open(path, "wb") as fh:
        fh.write(field_bytes(field))


def field_bytes(field: TextureField) -> bytes:
    header = json.dumps({"config": asdict(field.config)}).encode("utf-8")
    buf = io.BytesIO()
    buf.write(FIELD_MAGIC)
    buf.write(len(header).to_bytes(4, "little"))
    buf.write(header)
    for _, tensor in field.parameter_arrays():
        buf.write(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def load_field(path: str | os.PathLike) -> TextureField:
    with open(path, "rb") as fh:
        return field_from_bytes(fh.read())


def field_from_bytes(blob: bytes) -> TextureField:
    if blob[:4] != FIELD_MAGIC:
        raise CheckpointError("not a texture field blob (bad magic)")
    hlen = int.from_bytes(blob[4:8], "little")
    header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    config = FieldConfig(**header["config"])
    field = TextureField(config)
    offset = 8 + hlen
    with torch.no_grad():
        for _, tensor in field.parameter_arrays():
            nbytes = tensor.numel() * 4
            chunk = blob[offset : offset + nbytes]
            if len(chunk) != nbytes:
                raise CheckpointError("truncated field blob")
            arr = np.frombuffer(chunk, dtype="<f4").reshape(tuple(tensor.shape))
            tensor.copy_(torch.from_numpy(arr.copy()))
            offset += nbytes
    if offset != len(blob):
        raise CheckpointError("trailing bytes in field blob")
    return field
