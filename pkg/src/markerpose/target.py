"""Planar marker target description and its JSON schema (version 1)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import SchemaError

TARGET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TargetModel:
    """Marker centre positions (mm, z = 0) plus disc/bead geometry.

    Each marker is a circular disc whose face carries small bead holes;
    ``bead_offsets_mm`` are the hole centres relative to the disc centre.
    """

    marker_positions: np.ndarray                    # (N, 3), z = 0
    marker_disc_diameter: float = 14.0
    bead_diameter: float = 1.5
    bead_offsets: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 2)))   # (M, 2) within each disc

    def __post_init__(self):
        pos = np.asarray(self.marker_positions, dtype=float).reshape(-1, 3)
        if np.any(pos[:, 2] != 0.0):
            raise SchemaError("marker_positions_mm", "marker z-coordinates must be 0 (planar target)")
        object.__setattr__(self, "marker_positions", pos)
        object.__setattr__(self, "bead_offsets",
                           np.asarray(self.bead_offsets, dtype=float).reshape(-1, 2))
        if self.marker_disc_diameter <= 0 or self.bead_diameter <= 0:
            raise SchemaError("geometry", "disc and bead diameters must be positive")

    @property
    def marker_count(self) -> int:
        return self.marker_positions.shape[0]

    def plane_points(self) -> np.ndarray:
        """Marker centres as (N, 2) in-plane coordinates."""
        return self.marker_positions[:, :2].copy()

    def to_dict(self) -> dict:
        return {
            "version": TARGET_SCHEMA_VERSION,
            "marker_positions_mm": self.marker_positions.tolist(),
            "marker_disc_diameter_mm": float(self.marker_disc_diameter),
            "bead_diameter_mm": float(self.bead_diameter),
            "bead_offsets_mm": self.bead_offsets.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict, source: str = "<dict>") -> "TargetModel":
        try:
            version = data["version"]
            if version != TARGET_SCHEMA_VERSION:
                raise SchemaError(f"{source}.version", f"unsupported version {version}")
            return cls(
                marker_positions=np.array(data["marker_positions_mm"], dtype=float),
                marker_disc_diameter=float(data["marker_disc_diameter_mm"]),
                bead_diameter=float(data["bead_diameter_mm"]),
                bead_offsets=np.array(data["bead_offsets_mm"], dtype=float).reshape(-1, 2),
            )
        except KeyError as exc:
            raise SchemaError(f"{source}.{exc.args[0]}", "missing field") from exc


def save_target_model(model: TargetModel, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model.to_dict(), f, indent=2)
        f.write("\n")


def load_target_model(path: str | Path) -> TargetModel:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return TargetModel.from_dict(data, source=str(path))


def default_target_model() -> TargetModel:
    """The packaged 8-marker layout on a 100 x 160 mm footprint."""
    text = resources.files("markerpose.data").joinpath("default_target.json").read_text()
    return TargetModel.from_dict(json.loads(text), source="markerpose.data/default_target.json")
