"""
Field files and heatmaps.

A field file is a pair <stem>.json (header) and <stem>.bin (little-endian float64 payload,
field-major, rows of constant depth, x fastest), optionally with a <stem>.csv export.
"""

import json
from pathlib import Path
from typing import Literal

import matplotlib.image
import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.geoblend.errors import ArgumentError, DomainError, FieldFormatError
from src.geoblend.models import Grid2D
from src.harness.config import format_validation_error

logger = structlog.get_logger(__name__)

ORDERING = "field-major,row-major,x-fastest"


class FieldHeader(BaseModel):
    nx: int = Field(..., ge=1)
    ny: int = Field(..., ge=1)
    n_fields: int = Field(..., ge=1)
    dtype: Literal["<f8"] = "<f8"
    ordering: Literal["field-major,row-major,x-fastest"] = ORDERING
    meta: dict[str, str | int | float] = Field(default_factory=dict)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @property
    def payload_bytes(self) -> int:
        return 8 * self.nx * self.ny * self.n_fields


class FieldFile(BaseModel):
    header: FieldHeader
    values: np.ndarray

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    def component(self, field: int) -> np.ndarray:
        """Component field as an (ny, nx) array."""
        if not 0 <= field < self.header.n_fields:
            raise ArgumentError(
                f"Field index {field} out of range for {self.header.n_fields} fields"
            )
        n = self.header.nx * self.header.ny
        return self.values[field * n : (field + 1) * n].reshape(self.header.ny, self.header.nx)


def _paths(stem: str | Path) -> tuple[Path, Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".json"), stem.with_suffix(".bin"), stem.with_suffix(".csv")


def write_field(
    stem: str | Path,
    values: np.ndarray,
    grid: Grid2D,
    n_fields: int,
    meta: dict[str, str | int | float] | None = None,
    csv: bool = False,
) -> FieldHeader:
    """
    Write a joint field vector as header + binary payload (+ CSV).

    :param stem: Output path without suffix.
    :param values: Field-major vector of length n_fields * nx * ny.
    :param csv: Also write field,i,j,value rows at full float precision.
    """
    values = np.asarray(values, dtype="<f8")
    if values.shape != (n_fields * grid.n,):
        raise ArgumentError(
            f"Field vector has shape {values.shape}, expected ({n_fields * grid.n},)"
        )

    header = FieldHeader(nx=grid.nx, ny=grid.ny, n_fields=n_fields, meta=meta or {})
    header_path, payload_path, csv_path = _paths(stem)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    payload_path.write_bytes(values.tobytes())

    if csv:
        field_idx = np.repeat(np.arange(n_fields), grid.n)
        i = np.tile(np.arange(grid.nx), grid.ny * n_fields)
        j = np.tile(np.repeat(np.arange(grid.ny), grid.nx), n_fields)
        lines = ["field,i,j,value"] + [
            f"{f},{a},{b},{v!r}" for f, a, b, v in zip(field_idx, i, j, values.tolist())
        ]
        csv_path.write_text("\n".join(lines) + "\n")

    logger.info("Wrote field file", path=str(payload_path), n_fields=n_fields, csv=csv)
    return header


def read_field(stem: str | Path) -> FieldFile:
    """
    Read a field file written by write_field.

    :raises FieldFormatError: For a malformed header (naming the offending key) or a payload
        of the wrong length.
    """
    header_path, payload_path, _ = _paths(stem)
    try:
        raw = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise FieldFormatError(f"{header_path} is not valid JSON: {exc}") from exc
    try:
        header = FieldHeader.model_validate(raw)
    except ValidationError as exc:
        raise FieldFormatError(
            f"Invalid field header {header_path}: {format_validation_error(exc)}"
        ) from exc

    payload = payload_path.read_bytes()
    if len(payload) != header.payload_bytes:
        raise FieldFormatError(
            f"{payload_path} holds {len(payload)} bytes, header implies {header.payload_bytes}"
        )
    return FieldFile(header=header, values=np.frombuffer(payload, dtype="<f8").copy())


def read_field_csv(path: str | Path) -> np.ndarray:
    """Values column of a CSV export, in file order."""
    lines = Path(path).read_text().splitlines()[1:]
    return np.array([float(line.rsplit(",", 1)[1]) for line in lines])


def to_gray(field: np.ndarray, shared_scale: tuple[float, float] | None = None) -> np.ndarray:
    """
    Linear map of a 2-D field to 8-bit gray levels over shared_scale, else the field's
    min-max. A constant field maps to mid gray.
    """
    field = np.asarray(field, dtype=float)
    if field.ndim != 2:
        raise ArgumentError(f"Heatmaps need a 2-D field, got shape {field.shape}")
    bad = int(np.count_nonzero(~np.isfinite(field)))
    if bad:
        raise DomainError(f"Field has {bad} non-finite values")

    lo, hi = shared_scale if shared_scale is not None else (field.min(), field.max())
    if hi <= lo:
        return np.full(field.shape, 128, dtype=np.uint8)
    scaled = np.round((field - lo) / (hi - lo) * 255)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def render_heatmap(
    field: np.ndarray,
    path: str | Path,
    shared_scale: tuple[float, float] | None = None,
    png: bool = False,
) -> list[Path]:
    """
    Write a binary PGM (P5) heatmap, top row = smallest depth; with png also a PNG copy.

    :return: Paths written.
    """
    pixels = to_gray(field, shared_scale)
    ny, nx = pixels.shape
    pgm_path = Path(path).with_suffix(".pgm")
    pgm_path.parent.mkdir(parents=True, exist_ok=True)
    pgm_path.write_bytes(f"P5\n{nx} {ny}\n255\n".encode() + pixels.tobytes())
    written = [pgm_path]

    if png:
        png_path = pgm_path.with_suffix(".png")
        matplotlib.image.imsave(png_path, pixels, cmap="gray", vmin=0, vmax=255)
        written.append(png_path)

    logger.debug("Rendered heatmap", paths=[str(p) for p in written])
    return written


def common_scale(*fields: np.ndarray) -> tuple[float, float]:
    """Common min-max over several panels."""
    return (
        float(min(np.min(f) for f in fields)),
        float(max(np.max(f) for f in fields)),
    )
