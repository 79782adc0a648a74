"""12-parameter 3D affine transforms in physical (mm) coordinates.

A transform maps points from the moving frame to the fixed frame:
p_fixed = matrix @ p_moving + translation_mm. Vectors are ordered (z, y, x)
to match voxel axis order throughout the pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericalError


@dataclass(frozen=True)
class AffineTransform12:
    matrix: np.ndarray  # 3x3
    translation_mm: np.ndarray  # (3,)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation_mm, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(m)) < 1e-12:
            raise NumericalError("affine matrix is singular")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation_mm", t)

    @classmethod
    def identity(cls) -> "AffineTransform12":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to an (..., 3) array of (z, y, x) mm points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.matrix.T + self.translation_mm

    def compose(self, other: "AffineTransform12") -> "AffineTransform12":
        """self after other: (self ∘ other)(p) = self(other(p))."""
        return AffineTransform12(
            self.matrix @ other.matrix,
            self.matrix @ other.translation_mm + self.translation_mm,
        )

    def inverse(self) -> "AffineTransform12":
        inv = np.linalg.inv(self.matrix)
        return AffineTransform12(inv, -inv @ self.translation_mm)

    def as_params(self) -> np.ndarray:
        """Flatten to the 12-vector (9 matrix row-major, 3 translation)."""
        return np.concatenate([self.matrix.ravel(), self.translation_mm])

    @classmethod
    def from_params(cls, params) -> "AffineTransform12":
        p = np.asarray(params, dtype=np.float64).reshape(12)
        return cls(p[:9].reshape(3, 3), p[9:])

    def to_json(self) -> dict:
        return {
            "matrix": [float(v) for v in self.matrix.ravel()],
            "translation_mm": [float(v) for v in self.translation_mm],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AffineTransform12":
        return cls(
            np.asarray(obj["matrix"], dtype=np.float64).reshape(3, 3),
            np.asarray(obj["translation_mm"], dtype=np.float64),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "AffineTransform12":
        return cls.from_json(json.loads(Path(path).read_text()))


def random_transform(
    rng: np.random.Generator,
    max_rotation_deg: float = 10.0,
    scale_range: tuple[float, float] = (0.95, 1.05),
    max_translation_mm: float = 40.0,
    max_shear: float = 0.02,
) -> AffineTransform12:
    """Random 12-DOF transform within a bounded envelope (rotation about each
    axis, per-axis scale, small shear, bounded translation)."""
    angles = np.radians(rng.uniform(-max_rotation_deg, max_rotation_deg, size=3))
    cz, cy, cx = np.cos(angles)
    sz, sy, sx = np.sin(angles)
    # Rotations about the z, y, x axes of the (z,y,x) coordinate frame.
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    scale = np.diag(rng.uniform(*scale_range, size=3))
    shear = np.eye(3)
    shear[0, 1], shear[1, 2], shear[0, 2] = rng.uniform(-max_shear, max_shear, size=3)
    translation = rng.uniform(-max_translation_mm, max_translation_mm, size=3)
    return AffineTransform12(rz @ ry @ rx @ scale @ shear, translation)
