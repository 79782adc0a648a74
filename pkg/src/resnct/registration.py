"""12-DOF affine registration of contrast phases onto the non-contrast frame.

The pipeline has two stages:

1. Structure-moment pre-alignment: first and second moments of the body mask
   and the bone mask (present and geometrically identical in every phase) are
   matched by least squares over the full 12 parameters. This lands well
   inside the capture range even for large misalignments.
2. Multi-resolution polish of normalized mutual information (32-bin joint
   histogram with foreground-quantile bin edges) by a bounded derivative-free
   direction-set (Powell) search over a QR-style 12-parameter chart pivoted
   at the fixed-volume center: three Euler rotations, three scales, three
   upper-triangular shears, three translations normalized by 10 mm.

The returned transform is whichever of {pre-alignment, polished, identity}
scores highest on full-resolution foreground NMI, so polish can never lose
ground and the similarity-vs-identity contract holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .errors import NumericalError, ResnctError
from .transforms import AffineTransform12
from .volume_io import HU_MAX, HU_MIN, CtVolume

AIR_HU = -1000.0
TRANSLATION_SCALE_MM = 10.0
BODY_THRESHOLD_HU = -500.0
BONE_THRESHOLD_HU = 600.0


class RegistrationDomainError(ResnctError):
    """Fixed and moving volumes share no physical extent."""


@dataclass
class RegistrationOptions:
    bins: int = 32
    pyramid_factors: tuple[int, ...] = (4, 2, 1)
    # Direction-set iteration caps per pyramid level (full-resolution passes
    # are expensive; the moment pre-alignment carries most of the distance).
    max_iterations_per_level: tuple[int, ...] = (50, 30, 6)
    parameter_tolerance: float = 1e-5
    smoothing_sigma_voxels: float = 1.0
    # Search-envelope bounds per parameter group; they keep the direction-set
    # search from wandering into degenerate transforms (collapse, 180° flips).
    rotation_bound_rad: float = 0.35
    scale_bound: float = 0.15
    shear_bound: float = 0.10
    translation_bound: float = 8.0  # in units of TRANSLATION_SCALE_MM
    # Rotation offsets (radians, applied per axis) for extra starting points
    # at the coarsest level. The direction-set search is local; evaluations
    # at the coarsest level are cheap enough that restarting it from a few
    # rotated variants of the pre-alignment reliably escapes the local
    # optima that occasionally trap a single-start search.
    coarse_start_rotations_rad: tuple[float, ...] = (-0.15, 0.15)


@dataclass
class RegistrationResult:
    transform: AffineTransform12
    similarity: float
    iterations_used: int
    level_trace: list = field(default_factory=list)  # per level: best-value trace


def params_to_transform(
    params: np.ndarray, pivot_mm=(0.0, 0.0, 0.0)
) -> AffineTransform12:
    """Map the 12-parameter chart to a transform. The matrix is
    Rz@Ry@Rx @ diag(1+scale) @ unit-upper-triangular(shear), a QR factorization
    that covers every affine with positive-diagonal R. Rotation/scale act
    about the pivot point so the parameters stay decoupled from translation."""
    p = np.asarray(params, dtype=np.float64)
    cz, cy, cx = np.cos(p[0:3])
    sz, sy, sx = np.sin(p[0:3])
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    scale = np.diag(1.0 + p[3:6])
    shear = np.eye(3)
    shear[0, 1], shear[1, 2], shear[0, 2] = p[6:9]
    matrix = rz @ ry @ rx @ scale @ shear
    pivot = np.asarray(pivot_mm, dtype=np.float64)
    translation = pivot - matrix @ pivot + p[9:12] * TRANSLATION_SCALE_MM
    return AffineTransform12(matrix, translation)


def transform_to_params(
    transform: AffineTransform12, pivot_mm=(0.0, 0.0, 0.0)
) -> np.ndarray:
    """Inverse chart of params_to_transform via QR factorization."""
    q, r = np.linalg.qr(transform.matrix)
    signs = np.diag(np.sign(np.diag(r)))
    q = q @ signs
    r = signs @ r
    # Euler angles of q = Rz@Ry@Rx in the (z, y, x) axis ordering.
    ay = np.arcsin(np.clip(-q[2, 0], -1.0, 1.0))
    az = np.arctan2(q[2, 1], q[2, 2])
    ax = np.arctan2(q[1, 0], q[0, 0])
    angles = np.array([az, ay, ax])
    check = params_to_transform(np.concatenate([angles, np.zeros(9)])).matrix
    if not np.allclose(check, q, atol=1e-8):
        # Rare branch ambiguity: refine numerically from the closed form.
        from scipy.optimize import least_squares

        def resid(a):
            return (
                params_to_transform(np.concatenate([a, np.zeros(9)])).matrix - q
            ).ravel()

        angles = least_squares(resid, angles).x
    scales = np.diag(r) - 1.0
    unit_upper = np.diag(1.0 / np.diag(r)) @ r
    shears = np.array([unit_upper[0, 1], unit_upper[1, 2], unit_upper[0, 2]])
    pivot = np.asarray(pivot_mm, dtype=np.float64)
    trans = (
        transform.translation_mm - pivot + transform.matrix @ pivot
    ) / TRANSLATION_SCALE_MM
    return np.concatenate([angles, scales, shears, trans])


def _index_map(moving: CtVolume, transform: AffineTransform12, target) -> tuple:
    """Matrix/offset sending target voxel indices to moving voxel indices."""
    s_f = np.diag(target.spacing_mm)
    s_m_inv = np.diag(1.0 / np.asarray(moving.spacing_mm))
    m_inv = np.linalg.inv(transform.matrix)
    a = s_m_inv @ m_inv @ s_f
    b = s_m_inv @ (
        m_inv @ (np.asarray(target.origin_mm) - transform.translation_mm)
        - np.asarray(moving.origin_mm)
    )
    return a, b


def resample(
    moving: CtVolume, transform: AffineTransform12, target: CtVolume
) -> CtVolume:
    """Pull the moving volume through the transform onto the target grid.
    Linear interpolation; out-of-field voxels become air."""
    a, b = _index_map(moving, transform, target)
    out = ndimage.affine_transform(
        moving.voxels.astype(np.float64),
        matrix=a,
        offset=b,
        output_shape=target.shape,
        order=1,
        mode="constant",
        cval=AIR_HU,
    )
    return CtVolume(
        voxels=np.clip(np.rint(out), HU_MIN, HU_MAX).astype(np.int16),
        spacing_mm=target.spacing_mm,
        origin_mm=target.origin_mm,
        phase_label=moving.phase_label,
        patient_id=moving.patient_id,
    )


def _resample_float(
    moving_vox, moving_spacing, transform, shape, spacing,
    fixed_origin=(0.0, 0.0, 0.0), moving_origin=(0.0, 0.0, 0.0),
):
    s_f = np.diag(spacing)
    s_m_inv = np.diag(1.0 / np.asarray(moving_spacing))
    m_inv = np.linalg.inv(transform.matrix)
    a = s_m_inv @ m_inv @ s_f
    b = s_m_inv @ (
        m_inv @ (np.asarray(fixed_origin) - transform.translation_mm)
        - np.asarray(moving_origin)
    )
    return ndimage.affine_transform(
        moving_vox, matrix=a, offset=b, output_shape=shape, order=1,
        mode="constant", cval=AIR_HU,
    )


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def _nmi_from_joint(joint: np.ndarray) -> float:
    pxy = joint / joint.sum()
    h_joint = _entropy(pxy.ravel())
    if h_joint == 0:
        return 2.0
    return (_entropy(pxy.sum(axis=1)) + _entropy(pxy.sum(axis=0))) / h_joint


def normalized_mutual_information(
    a: np.ndarray,
    b: np.ndarray,
    bins: int = 32,
    a_edges: np.ndarray | None = None,
    b_edges: np.ndarray | None = None,
) -> float:
    """Studholme NMI (H(A)+H(B))/H(A,B); 1 for independent, 2 for identical.
    Explicit bin edges keep the objective consistent across resamplings."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a_edges is None or b_edges is None:
        joint, _, _ = np.histogram2d(a, b, bins=bins)
        return _nmi_from_joint(joint)
    nb_a = len(a_edges) - 1
    nb_b = len(b_edges) - 1
    ai = np.clip(np.searchsorted(a_edges, a, side="right") - 1, 0, nb_a - 1)
    bi = np.clip(np.searchsorted(b_edges, b, side="right") - 1, 0, nb_b - 1)
    joint = (
        np.bincount(ai * nb_b + bi, minlength=nb_a * nb_b)
        .astype(np.float64)
        .reshape(nb_a, nb_b)
    )
    return _nmi_from_joint(joint)


def _quantile_edges(values: np.ndarray, bins: int) -> np.ndarray:
    edges = np.quantile(values, np.linspace(0.0, 1.0, bins + 1))
    edges[0] -= 1.0
    edges[-1] += 1.0
    return edges


def _downsample(vox: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return vox
    smoothed = ndimage.gaussian_filter(vox, sigma=factor / 2.0)
    return smoothed[::factor, ::factor, ::factor]


def _mask_moments(mask: np.ndarray, spacing, origin) -> tuple:
    points = np.argwhere(mask) * np.asarray(spacing) + np.asarray(origin)
    mean = points.mean(axis=0)
    centered = points - mean
    return mean, centered.T @ centered / len(points)


def moment_prealign(fixed: CtVolume, moving: CtVolume) -> AffineTransform12:
    """Least-squares 12-DOF fit to the first/second moments of the body and
    bone masks, which are phase-invariant structures. Falls back to a pure
    centroid shift when only the body mask is usable."""
    from scipy.optimize import least_squares

    fvox = fixed.voxels
    mvox = moving.voxels
    structures = []
    for threshold in (BODY_THRESHOLD_HU, BONE_THRESHOLD_HU):
        fmask = fvox > threshold
        mmask = mvox > threshold
        if fmask.sum() < 50 or mmask.sum() < 50:
            continue
        structures.append(
            (
                _mask_moments(fmask, fixed.spacing_mm, fixed.origin_mm),
                _mask_moments(mmask, moving.spacing_mm, moving.origin_mm),
            )
        )
    if not structures:
        return AffineTransform12.identity()
    shift = structures[0][0][0] - structures[0][1][0]
    if len(structures) == 1:
        return AffineTransform12(np.eye(3), shift)

    def residuals(p):
        m = p[:9].reshape(3, 3)
        tvec = p[9:]
        out = []
        for (mu_f, c_f), (mu_m, c_m) in structures:
            out.append(m @ mu_m + tvec - mu_f)
            # Covariance residuals scaled toward the centroid residual scale.
            out.append((m @ c_m @ m.T - c_f).ravel() / 10.0)
        return np.concatenate(out)

    start = np.concatenate([np.eye(3).ravel(), shift])
    solution = least_squares(residuals, start, method="lm", xtol=1e-14, ftol=1e-14)
    matrix = solution.x[:9].reshape(3, 3)
    if abs(np.linalg.det(matrix)) < 1e-6:
        return AffineTransform12(np.eye(3), shift)
    return AffineTransform12(matrix, solution.x[9:])


def _extents_overlap(fixed: CtVolume, moving: CtVolume) -> bool:
    for o_f, n_f, s_f, o_m, n_m, s_m in zip(
        fixed.origin_mm, fixed.shape, fixed.spacing_mm,
        moving.origin_mm, moving.shape, moving.spacing_mm,
    ):
        if o_f + (n_f - 1) * s_f < o_m or o_m + (n_m - 1) * s_m < o_f:
            return False
    return True


def register_affine(
    fixed: CtVolume,
    moving: CtVolume,
    opts: RegistrationOptions | None = None,
) -> RegistrationResult:
    """Find the 12-DOF transform mapping moving physical coordinates into the
    fixed frame. Deterministic for fixed inputs."""
    opts = opts or RegistrationOptions()
    if fixed.voxels.size == 0 or moving.voxels.size == 0:
        raise RegistrationDomainError("empty volume")
    if not _extents_overlap(fixed, moving):
        raise RegistrationDomainError("fixed and moving volumes do not overlap")

    prealign = moment_prealign(fixed, moving)

    sigma = opts.smoothing_sigma_voxels
    fixed_f = ndimage.gaussian_filter(fixed.voxels.astype(np.float64), sigma)
    moving_f = ndimage.gaussian_filter(moving.voxels.astype(np.float64), sigma)
    pivot = (
        np.asarray(fixed.origin_mm)
        + (np.asarray(fixed.shape) - 1) * np.asarray(fixed.spacing_mm) / 2.0
    )

    fixed_fg = fixed_f[fixed_f > BODY_THRESHOLD_HU]
    moving_fg = moving_f[moving_f > BODY_THRESHOLD_HU]
    if fixed_fg.size < opts.bins or moving_fg.size < opts.bins:
        fixed_fg = fixed_f.ravel()
        moving_fg = moving_f.ravel()
    fixed_edges = _quantile_edges(fixed_fg, opts.bins)
    moving_edges = _quantile_edges(moving_fg, opts.bins)

    lower = np.array(
        [-opts.rotation_bound_rad] * 3
        + [-opts.scale_bound] * 3
        + [-opts.shear_bound] * 3
        + [-opts.translation_bound] * 3
    )
    upper = -lower

    full_mask = fixed_f > BODY_THRESHOLD_HU
    if not full_mask.any():
        full_mask = np.ones_like(fixed_f, dtype=bool)
    fixed_sel = fixed_f[full_mask]

    def full_similarity(t):
        warped = _resample_float(
            moving_f, moving.spacing_mm, t, fixed.shape, fixed.spacing_mm,
            fixed.origin_mm, moving.origin_mm,
        )
        return normalized_mutual_information(
            fixed_sel, warped[full_mask], opts.bins, fixed_edges, moving_edges
        )

    params = transform_to_params(prealign, pivot)
    level_trace = []
    iterations_total = 0
    caps = opts.max_iterations_per_level
    if isinstance(caps, int):
        caps = (caps,) * len(opts.pyramid_factors)
    prealign_params = params.copy()
    for factor, max_iterations in zip(opts.pyramid_factors, caps):
        if factor != opts.pyramid_factors[0]:
            # Coarser levels can wander out of the basin the pre-alignment
            # sits in; restart the finer level from the pre-alignment when
            # the full-resolution similarity says it is the better start.
            if (full_similarity(params_to_transform(prealign_params, pivot))
                    > full_similarity(params_to_transform(params, pivot))):
                params = prealign_params.copy()
        fvox = _downsample(fixed_f, factor)
        mvox = _downsample(moving_f, factor)
        fspacing = np.asarray(fixed.spacing_mm) * factor
        mspacing = np.asarray(moving.spacing_mm) * factor
        # Similarity over fixed-image foreground only: whole-image NMI can be
        # gamed by pushing the moving image into the air bin.
        fmask = fvox > BODY_THRESHOLD_HU
        if not fmask.any():
            fmask = np.ones_like(fvox, dtype=bool)
        fsel = fvox[fmask]
        trace = []
        best = [np.inf]

        def neg_nmi(p):
            t = params_to_transform(p, pivot)
            warped = _resample_float(
                mvox, mspacing, t, fvox.shape, fspacing,
                fixed.origin_mm, moving.origin_mm,
            )
            value = -normalized_mutual_information(
                fsel, warped[fmask], opts.bins, fixed_edges, moving_edges
            )
            if not np.isfinite(value):
                raise NumericalError("similarity became non-finite during optimization")
            return value

        def record(p):
            value = neg_nmi(p)
            if value < best[0]:
                best[0] = value
            trace.append(-best[0])

        starts = [params]
        if factor == opts.pyramid_factors[0]:
            # Cheap extra starts at the coarsest level only: the identity and
            # per-axis rotation perturbations of the pre-alignment.
            starts.append(np.zeros_like(params))
            for axis in range(3):
                for offset in opts.coarse_start_rotations_rad:
                    perturbed = params.copy()
                    perturbed[axis] += offset
                    starts.append(perturbed)
        runs = []
        for start in starts:
            bounds = optimize.Bounds(
                np.minimum(lower, start - 1e-9), np.maximum(upper, start + 1e-9)
            )
            result = optimize.minimize(
                neg_nmi,
                start,
                method="Powell",
                bounds=bounds,
                callback=record,
                options={
                    "maxiter": max_iterations,
                    "xtol": opts.parameter_tolerance,
                    "ftol": 1e-12,
                },
            )
            iterations_total += int(result.nit)
            runs.append(np.asarray(result.x))
        if len(runs) == 1:
            params = runs[0]
        else:
            # The coarse objective is too crude to pick between basins; rank
            # the coarse results by the full-resolution similarity instead
            # (one evaluation each).
            params = max(
                runs,
                key=lambda p: full_similarity(params_to_transform(p, pivot)),
            )
        level_trace.append({"factor": factor, "similarity": trace})

    polished = params_to_transform(params, pivot)

    candidates = [
        (full_similarity(AffineTransform12.identity()), 0, AffineTransform12.identity()),
        (full_similarity(prealign), 1, prealign),
        (full_similarity(polished), 2, polished),
    ]
    best_value, priority, best_transform = max(candidates, key=lambda c: (c[0], c[1]))

    if priority != 2:
        # The pyramid result lost to one of its own starting points, so the
        # winner never received a full-resolution polish. Give it one, but
        # confined: the similarity is a staircase at long range (line
        # searches across the whole translation envelope can land in distant
        # spurious minima), so restrict this pass to a small box around the
        # winner where the objective is locally smooth.
        best_value, best_transform = _local_polish(
            best_transform, best_value, full_similarity, pivot, lower, upper,
            opts, caps,
        )

    return RegistrationResult(best_transform, best_value, iterations_total, level_trace)


def _local_polish(best_transform, best_value, full_similarity, pivot,
                  lower, upper, opts, caps):
    start = transform_to_params(best_transform, pivot)
    local_halfwidth = np.array([0.08] * 3 + [0.03] * 3 + [0.03] * 3 + [0.6] * 3)
    bounds = optimize.Bounds(
        np.maximum(lower, start - local_halfwidth),
        np.minimum(upper, start + local_halfwidth),
    )
    bounds = optimize.Bounds(
        np.minimum(bounds.lb, start - 1e-9), np.maximum(bounds.ub, start + 1e-9)
    )

    def neg_full(p):
        value = -full_similarity(params_to_transform(p, pivot))
        if not np.isfinite(value):
            raise NumericalError("similarity became non-finite during optimization")
        return value

    result = optimize.minimize(
        neg_full, start, method="Powell", bounds=bounds,
        options={"maxiter": 2 * caps[-1],
                 "xtol": opts.parameter_tolerance / 10,
                 "ftol": 1e-12},
    )
    repolished = params_to_transform(np.asarray(result.x), pivot)
    value = full_similarity(repolished)
    if value > best_value:
        return value, repolished
    return best_value, best_transform


def max_displacement_voxels(
    recovered: AffineTransform12,
    truth: AffineTransform12,
    mask: np.ndarray,
    spacing_mm,
) -> float:
    """Largest voxel-space displacement of recovered∘truth from identity over
    the masked voxels."""
    idx = np.argwhere(mask)
    points = idx * np.asarray(spacing_mm)
    moved = recovered.compose(truth).apply(points)
    disp_vox = (moved - points) / np.asarray(spacing_mm)
    return float(np.linalg.norm(disp_vox, axis=1).max())
