"""Synthetic three-phase abdominal phantoms with exact ground truth.

Each phantom is a body ellipse containing two kidney ellipsoids with
collecting systems and optional lesions. The three contrast phases share one
tissue label map; attenuation per phase is a per-tissue table value plus
optional Gaussian noise, so the nephrographic phase is a deterministic
function of the inputs and every ROI has a known mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .transforms import AffineTransform12
from .volume_io import HU_MAX, HU_MIN, CtVolume, Phase, SliceManifest

AIR_HU = -1000

# Tissue label codes in the truth label map.
BACKGROUND = 0
SOFT_TISSUE = 1
BONE = 2
KIDNEY = 3
COLLECTING_SYSTEM = 4
LESION_BASE = 10  # lesion i gets label LESION_BASE + i

PHASES = (Phase.NON_CONTRAST, Phase.NEPHROGRAPHIC, Phase.UROGRAPHIC)

# Per-tissue HU by phase (non_contrast, nephrographic, urographic). Lesion
# values follow typical cyst/solid-mass enhancement behavior; the rest are
# plausible soft-tissue choices used only for phantom generation.
DEFAULT_HU_TABLE = {
    "background": (AIR_HU, AIR_HU, AIR_HU),
    "soft_tissue": (40, 70, 60),
    # Bone sits above every contrast-enhanced tissue (collecting system peaks
    # at 500 HU urographic) so a >600 HU threshold isolates it in all phases.
    "bone": (700, 700, 700),
    "kidney": (30, 160, 110),
    "collecting_system": (10, 40, 500),
    "cyst": (11, 15, 17),
    "solid_mass": (33, 93, 90),
}


@dataclass(frozen=True)
class Lesion:
    center_mm: tuple[float, float, float]  # (z, y, x) offset from kidney center
    radius_mm: float
    kind: str  # "cyst" | "solid_mass"
    kidney: int  # 0 = left, 1 = right

    def __post_init__(self):
        if self.kind not in ("cyst", "solid_mass"):
            raise ConfigError(f"unknown lesion kind {self.kind!r}")
        if self.radius_mm <= 0:
            raise ConfigError("lesion radius must be positive")


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (24, 128, 128)
    spacing_mm: tuple[float, float, float] = (2.5, 1.5, 1.5)
    body_axes_mm: tuple[float, float, float] = (60.0, 70.0, 80.0)  # (z, y, x) semi-axes
    kidney_axes_mm: tuple[float, float, float] = (24.0, 28.0, 20.0)
    kidney_offset_x_mm: float = 48.0
    collecting_axes_mm: tuple[float, float, float] = (9.0, 11.0, 7.0)
    spine_offset_y_mm: float = 45.0  # posterior of center; breaks 180° symmetry
    spine_radius_mm: float = 12.0
    lesions: tuple[Lesion, ...] = (
        Lesion((2.0, -6.0, -4.0), 8.0, "solid_mass", 0),
        Lesion((-2.0, 5.0, 4.0), 8.0, "cyst", 1),
    )
    hu_table: dict = field(default_factory=lambda: dict(DEFAULT_HU_TABLE))
    noise_sigma_hu: float = 5.0
    seed: int = 0
    patient_id: str = "phantom-000"

    def __post_init__(self):
        for name, row in self.hu_table.items():
            for hu in row:
                if not HU_MIN <= hu <= HU_MAX:
                    raise ConfigError(f"HU table entry {name}={hu} outside CT range")
        if self.noise_sigma_hu < 0:
            raise ConfigError("noise sigma must be >= 0")


@dataclass
class PhantomTruth:
    labels: np.ndarray  # int label map, same dims as the volumes
    lesion_mean_hu: list[dict]  # per lesion: {"kind", "label", phase: mean}
    injected: dict  # phase value -> AffineTransform12 JSON, filled on injection

    def kidney_mask(self) -> np.ndarray:
        return self.labels >= KIDNEY

    def lesion_mask(self, index: int) -> np.ndarray:
        return self.labels == LESION_BASE + index


def _grid_mm(dims, spacing):
    axes = [np.arange(n) * s for n, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _kidney_centers(cfg: PhantomConfig):
    dims, sp = cfg.dims, cfg.spacing_mm
    center = [(n - 1) * s / 2.0 for n, s in zip(dims, sp)]
    left = (center[0], center[1], center[2] - cfg.kidney_offset_x_mm)
    right = (center[0], center[1], center[2] + cfg.kidney_offset_x_mm)
    return [left, right]


def build_label_map(cfg: PhantomConfig) -> np.ndarray:
    zz, yy, xx = _grid_mm(cfg.dims, cfg.spacing_mm)
    center = [(n - 1) * s / 2.0 for n, s in zip(cfg.dims, cfg.spacing_mm)]

    labels = np.zeros(cfg.dims, dtype=np.int16)
    bz, by, bx = cfg.body_axes_mm
    body = (
        ((zz - center[0]) / bz) ** 2
        + ((yy - center[1]) / by) ** 2
        + ((xx - center[2]) / bx) ** 2
    ) <= 1.0
    labels[body] = SOFT_TISSUE

    # Spine: bone cylinder posterior of center, spanning the body's z-extent.
    spine = body & (
        ((yy - (center[1] + cfg.spine_offset_y_mm)) ** 2 + (xx - center[2]) ** 2)
        <= cfg.spine_radius_mm**2
    )
    labels[spine] = BONE

    kz, ky, kx = cfg.kidney_axes_mm
    kidney_centers = _kidney_centers(cfg)
    for kc in kidney_centers:
        kid = (
            ((zz - kc[0]) / kz) ** 2
            + ((yy - kc[1]) / ky) ** 2
            + ((xx - kc[2]) / kx) ** 2
        ) <= 1.0
        labels[kid] = KIDNEY
    cz, cy, cx = cfg.collecting_axes_mm
    for kc in kidney_centers:
        cs = (
            ((zz - kc[0]) / cz) ** 2
            + ((yy - kc[1]) / cy) ** 2
            + ((xx - kc[2]) / cx) ** 2
        ) <= 1.0
        labels[cs] = COLLECTING_SYSTEM

    for i, lesion in enumerate(cfg.lesions):
        kc = kidney_centers[lesion.kidney]
        lc = tuple(k + o for k, o in zip(kc, lesion.center_mm))
        # Lesion must sit inside its kidney ellipsoid, radius included.
        margin = max(
            abs(o) / a for o, a in zip(lesion.center_mm, cfg.kidney_axes_mm)
        ) + lesion.radius_mm / min(cfg.kidney_axes_mm)
        if margin > 1.0:
            raise ConfigError(
                f"lesion {i} ({lesion.kind}) extends outside kidney {lesion.kidney}"
            )
        sphere = (
            (zz - lc[0]) ** 2 + (yy - lc[1]) ** 2 + (xx - lc[2]) ** 2
        ) <= lesion.radius_mm**2
        labels[sphere] = LESION_BASE + i
    return labels


def _tissue_name(label: int, cfg: PhantomConfig) -> str:
    if label == BACKGROUND:
        return "background"
    if label == SOFT_TISSUE:
        return "soft_tissue"
    if label == BONE:
        return "bone"
    if label == KIDNEY:
        return "kidney"
    if label == COLLECTING_SYSTEM:
        return "collecting_system"
    return cfg.lesions[label - LESION_BASE].kind


def generate_phantom(cfg: PhantomConfig) -> tuple[dict, PhantomTruth]:
    """Three aligned CtVolumes (by phase) plus exact truth; deterministic per seed."""
    labels = build_label_map(cfg)
    rng = np.random.default_rng(cfg.seed)

    present = sorted(int(v) for v in np.unique(labels))
    volumes = {}
    for pi, phase in enumerate(PHASES):
        hu = np.empty(cfg.dims, dtype=np.float64)
        for label in present:
            hu[labels == label] = cfg.hu_table[_tissue_name(label, cfg)][pi]
        if cfg.noise_sigma_hu > 0:
            hu = hu + rng.normal(0.0, cfg.noise_sigma_hu, size=cfg.dims)
        voxels = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
        volumes[phase] = CtVolume(
            voxels=voxels,
            spacing_mm=cfg.spacing_mm,
            phase_label=phase,
            patient_id=cfg.patient_id,
        )

    lesion_means = []
    for i, lesion in enumerate(cfg.lesions):
        mask = labels == LESION_BASE + i
        entry = {"kind": lesion.kind, "label": LESION_BASE + i}
        for phase in PHASES:
            entry[phase.value] = float(volumes[phase].voxels[mask].mean())
        lesion_means.append(entry)

    truth = PhantomTruth(labels=labels, lesion_mean_hu=lesion_means, injected={})
    return volumes, truth


def kidney_z_range(labels: np.ndarray) -> tuple[int, int]:
    """Half-open z-range of slices containing kidney tissue."""
    zs = np.where((labels >= KIDNEY).any(axis=(1, 2)))[0]
    if zs.size == 0:
        raise ConfigError("phantom contains no kidney voxels")
    return int(zs[0]), int(zs[-1]) + 1


def kidney_crop_boxes(labels: np.ndarray, size: int = 128) -> list[tuple[int, int]]:
    """In-plane `(y0, x0)` crop origins, one per kidney, each centering a
    `size`-square window on that kidney (clamped to the volume bounds).
    Kidneys are separated by the x midline."""
    _, ny, nx = labels.shape
    if size > ny or size > nx:
        raise ConfigError(f"crop size {size} exceeds slice shape {(ny, nx)}")
    boxes = []
    flat = (labels >= KIDNEY).any(axis=0)
    for x_off, sel in ((0, flat[:, : nx // 2]), (nx // 2, flat[:, nx // 2:])):
        idx = np.argwhere(sel)
        if idx.size == 0:
            continue
        cy, cx = idx.mean(axis=0)
        cx += x_off
        y0 = int(np.clip(round(cy - size / 2), 0, ny - size))
        x0 = int(np.clip(round(cx - size / 2), 0, nx - size))
        boxes.append((y0, x0))
    if not boxes:
        raise ConfigError("phantom contains no kidney voxels")
    return boxes


def make_manifests(cfg: PhantomConfig, truth: PhantomTruth, split: str = "train"):
    z_lo, z_hi = kidney_z_range(truth.labels)
    return [
        SliceManifest(cfg.patient_id, phase, z_lo, z_hi, split) for phase in PHASES
    ]


def inject_misregistration(
    volume: CtVolume, transform: AffineTransform12
) -> CtVolume:
    """Resample a volume through a known transform to create a registration
    problem; linear interpolation, out-of-grid voxels filled with air."""
    from .registration import resample  # local import avoids a cycle

    return resample(volume, transform, target=volume)


def registration_config(seed: int = 0, **overrides) -> PhantomConfig:
    """Phantom sized for registration trials: the body sits ≥ 40 mm inside the
    grid on every axis, so transforms with translations up to 40 mm keep all
    anatomy in the field of view and recovery stays well-posed."""
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(0.9, 1.1, size=3)
    defaults = dict(
        dims=(32, 96, 96),
        spacing_mm=(5.0, 2.5, 2.5),
        body_axes_mm=(40.0, 70.0, 80.0),
        kidney_axes_mm=(20.0 * jitter[0], 24.0 * jitter[1], 18.0 * jitter[2]),
        kidney_offset_x_mm=float(rng.uniform(38, 45)),
        collecting_axes_mm=(8.0, 10.0, 6.0),
        spine_offset_y_mm=45.0,
        spine_radius_mm=12.0,
        lesions=(),
        seed=seed,
        patient_id=f"regphantom-{seed:03d}",
    )
    defaults.update(overrides)
    return PhantomConfig(**defaults)


def randomized_config(seed: int, **overrides) -> PhantomConfig:
    """Phantom config with seeded geometric jitter, for building corpora of
    distinct but structurally consistent phantoms."""
    rng = np.random.default_rng(seed)
    kz, ky, kx = 24.0, 28.0, 20.0
    jitter = rng.uniform(0.85, 1.15, size=3)
    lesion_kind = ["solid_mass", "cyst"]
    rng.shuffle(lesion_kind)
    lesions = (
        Lesion(tuple(rng.uniform(-4, 4, size=3)), rng.uniform(8.5, 11.5), lesion_kind[0], 0),
        Lesion(tuple(rng.uniform(-4, 4, size=3)), rng.uniform(8.5, 11.5), lesion_kind[1], 1),
    )
    defaults = dict(
        dims=(24, 256, 256),
        spacing_mm=(2.5, 0.75, 0.75),
        kidney_axes_mm=(kz * jitter[0], ky * jitter[1], kx * jitter[2]),
        kidney_offset_x_mm=float(rng.uniform(42, 54)),
        body_axes_mm=(60.0, float(rng.uniform(64, 72)), float(rng.uniform(74, 86))),
        lesions=lesions,
        seed=seed,
        patient_id=f"phantom-{seed:03d}",
    )
    defaults.update(overrides)
    return PhantomConfig(**defaults)


def save_truth(truth: PhantomTruth, path: str | Path) -> None:
    """JSON summary plus the full label map as a sibling labels.npy."""
    path = Path(path)
    labels_path = path.with_name("labels.npy")
    np.save(labels_path, truth.labels)
    obj = {
        "lesion_mean_hu": truth.lesion_mean_hu,
        "injected": truth.injected,
        "kidney_z_range": list(kidney_z_range(truth.labels)),
        "labels_file": labels_path.name,
        "label_counts": {
            str(int(k)): int(v)
            for k, v in zip(*np.unique(truth.labels, return_counts=True))
        },
    }
    path.write_text(json.dumps(obj, indent=2))
