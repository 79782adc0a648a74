"""CT volume container, HU windowing, slice manifests and dataset splits.

Volumes are stored in a minimal "CTV" container: a 4-byte magic, a
length-prefixed UTF-8 JSON header, then the raw little-endian int16 voxel
payload in z-major order. The format is dependency-free and round-trips
bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError, ManifestError

CTV_MAGIC = b"CTV1"
HU_MIN = -1024
HU_MAX = 3071


class Phase(str, Enum):
    NON_CONTRAST = "non_contrast"
    NEPHROGRAPHIC = "nephrographic"
    UROGRAPHIC = "urographic"


@dataclass(frozen=True)
class WindowSpec:
    """Display/processing window: clip range is [center - width/2, center + width/2]."""

    width: float = 400.0
    center: float = 50.0

    def __post_init__(self):
        if self.width <= 0:
            raise ConfigError(f"window width must be > 0, got {self.width}")

    @property
    def lo(self) -> float:
        return self.center - self.width / 2.0

    @property
    def hi(self) -> float:
        return self.center + self.width / 2.0


@dataclass
class CtVolume:
    """3D signed-int16 HU grid (z, y, x) with physical metadata."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    phase_label: Phase = Phase.NON_CONTRAST
    patient_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise ConfigError(f"voxels must be 3D (z,y,x), got ndim={v.ndim}")
        if v.dtype != np.int16:
            if not np.issubdtype(v.dtype, np.integer):
                raise ConfigError(f"voxels must be integer HU, got dtype {v.dtype}")
            v = v.astype(np.int16)
        if v.size and (v.min() < HU_MIN or v.max() > HU_MAX):
            raise ConfigError(
                f"HU values outside [{HU_MIN}, {HU_MAX}]: "
                f"range [{v.min()}, {v.max()}]"
            )
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ConfigError(f"spacing_mm components must be > 0, got {self.spacing_mm}")
        self.voxels = v
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.origin_mm = tuple(float(o) for o in self.origin_mm)
        self.phase_label = Phase(self.phase_label)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CtVolume):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.voxels, other.voxels)
            and self.spacing_mm == other.spacing_mm
            and self.origin_mm == other.origin_mm
            and self.phase_label == other.phase_label
            and self.patient_id == other.patient_id
        )


def write_volume(volume: CtVolume, path: str | Path) -> None:
    header = {
        "shape": list(volume.shape),
        "spacing_mm": list(volume.spacing_mm),
        "origin_mm": list(volume.origin_mm),
        "phase": volume.phase_label.value,
        "patient_id": volume.patient_id,
        "dtype": "int16",
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(volume.voxels, dtype="<i2").tobytes()
    with open(path, "wb") as f:
        f.write(CTV_MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(payload)


def read_volume(path: str | Path) -> CtVolume:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CTV_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: unparseable header: {e}") from e
        for key in ("shape", "spacing_mm", "phase"):
            if key not in header:
                raise FormatError(f"{path}: header missing '{key}'")
        shape = tuple(int(s) for s in header["shape"])
        if len(shape) != 3:
            raise FormatError(f"{path}: shape must have 3 dims, got {shape}")
        expected = 2 * shape[0] * shape[1] * shape[2]
        payload = f.read(expected + 1)
        if len(payload) != expected:
            raise CorruptionError(
                f"{path}: payload is {len(payload)} bytes, header declares {expected}"
            )
    voxels = np.frombuffer(payload, dtype="<i2").reshape(shape).astype(np.int16)
    return CtVolume(
        voxels=voxels,
        spacing_mm=tuple(header["spacing_mm"]),
        origin_mm=tuple(header.get("origin_mm", (0.0, 0.0, 0.0))),
        phase_label=Phase(header["phase"]),
        patient_id=header.get("patient_id", ""),
    )


def window_to_unit(hu, spec: WindowSpec = WindowSpec()) -> np.ndarray:
    """Map HU to [0, 1] through the window; total and monotone nondecreasing."""
    hu = np.asarray(hu, dtype=np.float64)
    return np.clip((hu - spec.lo) / spec.width, 0.0, 1.0)


def unit_to_hu(x, spec: WindowSpec = WindowSpec()) -> np.ndarray:
    """Inverse of window_to_unit on the in-window range."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ConfigError(f"unit values outside [0,1]: range [{x.min()}, {x.max()}]")
    return spec.lo + x * spec.width


@dataclass
class SliceManifest:
    """Per-patient, per-phase z-range [lo, hi) covering the kidneys."""

    patient_id: str
    phase: Phase
    z_lo: int
    z_hi: int
    split: str = "train"

    def __post_init__(self):
        self.phase = Phase(self.phase)
        if self.z_lo >= self.z_hi:
            raise ManifestError(
                f"{self.patient_id}/{self.phase.value}: empty z-range "
                f"[{self.z_lo}, {self.z_hi})"
            )
        if self.split not in ("train", "test"):
            raise ManifestError(f"split must be train|test, got {self.split!r}")


def extract_slices(volume: CtVolume, manifest: SliceManifest) -> list[np.ndarray]:
    """Slices z_lo..z_hi-1 in z order, each (y, x) int16 HU."""
    nz = volume.shape[0]
    if manifest.z_lo < 0 or manifest.z_hi > nz:
        raise ManifestError(
            f"z-range [{manifest.z_lo}, {manifest.z_hi}) exceeds volume z-extent {nz}"
        )
    return [volume.voxels[z].copy() for z in range(manifest.z_lo, manifest.z_hi)]


def write_manifests(manifests: list[SliceManifest], path: str | Path) -> None:
    rows = [
        {
            "patient_id": m.patient_id,
            "phase": m.phase.value,
            "z_lo": m.z_lo,
            "z_hi": m.z_hi,
            "split": m.split,
        }
        for m in manifests
    ]
    Path(path).write_text(json.dumps(rows, indent=2))


def read_manifests(path: str | Path) -> list[SliceManifest]:
    rows = json.loads(Path(path).read_text())
    return [SliceManifest(**row) for row in rows]


def split_dataset(items: list, fraction: float, seed: int) -> tuple[list, list]:
    """Seeded-shuffle prefix split; train size = round(fraction * N)."""
    if not items:
        raise ConfigError("cannot split an empty dataset")
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    # Explicit Fisher-Yates so the shuffle is reproducible from the seed
    # without depending on numpy's permutation internals.
    rng = np.random.default_rng(seed)
    order = list(range(len(items)))
    for i in range(len(order) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    n_train = int(round(fraction * len(items)))
    train = [items[i] for i in order[:n_train]]
    test = [items[i] for i in order[n_train:]]
    return train, test
