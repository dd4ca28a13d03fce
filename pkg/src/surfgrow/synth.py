"""Synthetic longitudinal inner/outer surface cohorts.

Subjects are deformed icospheres. The radial profile of each subject is a
random band-limited fold field; growth amplifies the existing folds
(compositionally: month 6 amplifies the month-3 state), adds a
direction-dependent quadratic expansion pattern and a fold-squared term.
Both nonlinearities are functions of the baseline geometry, so they are
learnable from local shape descriptors but not representable by any global
affine map. Thickness rides on an independent smooth field plus a fold
coupling, and the outer surface sits at inner + thickness along the radial
direction.

An ``affine`` growth mode replaces all of this with one shared affine map
per transition (for baseline sanity checks).

All coordinates are quantized to 9 significant digits at generation time so
in-memory cohorts round-trip bit-exactly through OFF files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .mesh import (
    LongitudinalSample,
    SurfacePair,
    TriangleMesh,
    icosphere,
    load_mesh,
    save_mesh,
)
from .network import GrowthMaps, thickness

__all__ = [
    "GrowthModel",
    "CohortSpec",
    "generate_cohort",
    "cohort_report",
    "write_cohort",
    "read_cohort",
]


@dataclass(frozen=True)
class GrowthModel:
    """Constants of the cohort-wide growth rule (all lengths in mm)."""

    base_radius: float = 25.0
    expansion: tuple = (1.0, 1.05, 1.12)
    fold_amplitude: float = 1.2
    fold_gain: tuple = (1.35, 1.3)
    fold_square: tuple = (0.55, 0.5)
    fold_square_scale: float = 2.0
    pattern_gain: tuple = (0.030, 0.026)
    thickness_base: tuple = (2.0, 2.35, 2.65)
    thickness_jitter: float = 0.22
    thickness_fold: tuple = (0.0, 0.1, 0.16)
    max_growth: float = 5.0
    n_harmonics: int = 6
    mode: str = "nonlinear"

    def __post_init__(self):
        if self.mode not in ("nonlinear", "affine"):
            raise ValueError(f"unknown growth mode {self.mode!r}")
        if min(self.thickness_base) <= 0:
            raise ValueError("thickness must be positive")


@dataclass(frozen=True)
class CohortSpec:
    """Cohort size, availability split and mesh resolution.

    ``split`` counts (complete, month-6 missing, month-3 missing) subjects
    and must sum to ``n_subjects``.
    """

    n_subjects: int = 37
    split: tuple = (23, 5, 9)
    mesh_level: int = 4
    seed: int = 20240601
    growth: GrowthModel = field(default_factory=GrowthModel)

    def __post_init__(self):
        if sum(self.split) != self.n_subjects:
            raise ValueError(
                f"split {self.split} does not sum to {self.n_subjects} subjects"
            )
        if len(self.split) != 3 or min(self.split) < 0:
            raise ValueError("split must be three non-negative counts")


# fixed affine transitions for mode="affine" (shared by all subjects)
_AFFINE_3 = np.array(
    [[1.09, 0.030, 0.0], [0.0, 1.06, 0.020], [0.012, 0.0, 1.08]]
)
_AFFINE_T3 = np.array([0.4, -0.3, 0.2])
_AFFINE_6 = np.array(
    [[1.05, 0.0, 0.015], [0.018, 1.07, 0.0], [0.0, 0.01, 1.04]]
)
_AFFINE_T6 = np.array([-0.2, 0.35, 0.15])


def _quantize9(values):
    """Round to 9 significant decimal digits exactly as the OFF writer does."""
    flat = values.ravel()
    out = np.fromiter((float(f"{v:.9g}") for v in flat), dtype=np.float64,
                      count=flat.size)
    return out.reshape(values.shape)


def _smooth_field(rng, directions, n_harmonics):
    """Band-limited zero-mean field on the sphere, squashed to (-1, 1)."""
    total = np.zeros(directions.shape[0])
    for _ in range(n_harmonics):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        wavenumber = rng.uniform(2.0, 5.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        total += np.cos(wavenumber * (directions @ axis) + phase)
    return np.tanh(total / np.sqrt(n_harmonics / 2.0))


def _quadratic_pattern(directions):
    x, y, z = directions.T
    return 0.5 * (3.0 * z * z - 1.0) + 0.5 * (x * x - y * y)


def _subject_surfaces(spec, subject_index, template, directions):
    """Per-month (inner, outer) position arrays for one subject."""
    g = spec.growth
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, subject_index])
    )
    fold_field = _smooth_field(rng, directions, g.n_harmonics)
    thick_field = _smooth_field(rng, directions, g.n_harmonics)
    r0 = g.base_radius
    s1, s3, s6 = g.expansion

    fold1 = g.fold_amplitude * fold_field
    radius1 = r0 * s1 + fold1
    thick = [
        g.thickness_base[m] + g.thickness_jitter * thick_field
        + g.thickness_fold[m] * fold_field
        for m in range(3)
    ]

    if g.mode == "affine":
        raw1_inner = radius1[:, None] * directions
        raw1_outer = (radius1 + thick[0])[:, None] * directions
        raw3_inner = raw1_inner @ _AFFINE_3.T + _AFFINE_T3
        raw3_outer = raw1_outer @ _AFFINE_3.T + _AFFINE_T3
        raw6_inner = raw3_inner @ _AFFINE_6.T + _AFFINE_T6
        raw6_outer = raw3_outer @ _AFFINE_6.T + _AFFINE_T6
    else:
        pattern = _quadratic_pattern(directions)
        g3, g6 = g.fold_gain
        q3, q6 = g.fold_square
        e3, e6 = g.pattern_gain
        norm1 = fold1 / g.fold_amplitude
        radius3 = (
            r0 * s3 + g3 * fold1 + q3 * (norm1 * norm1 - 0.5)
            + e3 * r0 * pattern
        )
        fold3 = radius3 - r0 * s3
        norm3 = fold3 / g.fold_square_scale
        radius6 = (
            r0 * s6 + g6 * fold3 + q6 * (norm3 * norm3 - 0.5)
            + e6 * r0 * pattern
        )
        raw1_inner = radius1[:, None] * directions
        raw1_outer = (radius1 + thick[0])[:, None] * directions
        raw3_inner = radius3[:, None] * directions
        raw3_outer = (radius3 + thick[1])[:, None] * directions
        raw6_inner = radius6[:, None] * directions
        raw6_outer = (radius6 + thick[2])[:, None] * directions

    # quantize the baseline, then express later months as baseline plus a
    # quantized-difference growth map; storing "x1 + O3" as the month-3
    # positions makes reconstruction from the growth maps bit-exact
    in1 = _quantize9(raw1_inner)
    out1 = _quantize9(raw1_outer)
    o3_inner = _quantize9(raw3_inner) - in1
    o3_outer = _quantize9(raw3_outer) - out1
    in3 = in1 + o3_inner
    out3 = out1 + o3_outer
    o6_inner = _quantize9(raw6_inner) - in3
    o6_outer = _quantize9(raw6_outer) - out3
    in6 = in3 + o6_inner
    out6 = out3 + o6_outer
    positions = ((in1, out1), (in3, out3), (in6, out6))
    growth = (o3_inner, o3_outer, o6_inner, o6_outer)
    return positions, growth


def generate_cohort(spec):
    """Deterministic cohort: samples plus ground-truth growth maps.

    Returns ``(samples, truths)`` where ``truths`` maps subject id to a
    :class:`GrowthMaps` computed from the stored (quantized) positions, so
    ``reconstruct_surfaces(baseline, truth)`` reproduces the stored
    month-3/6 surfaces bit-exactly.
    """
    template = icosphere(spec.mesh_level)
    directions = template.positions / np.linalg.norm(
        template.positions, axis=1, keepdims=True
    )
    shuffle = np.random.default_rng(
        np.random.SeedSequence([spec.seed, 0xC0])
    ).permutation(spec.n_subjects)
    complete, only13, _ = spec.split
    has_m3 = np.zeros(spec.n_subjects, dtype=bool)
    has_m6 = np.zeros(spec.n_subjects, dtype=bool)
    has_m3[shuffle[: complete + only13]] = True
    has_m6[shuffle[:complete]] = True
    has_m6[shuffle[complete + only13 :]] = True

    samples = []
    truths = {}
    for i in range(spec.n_subjects):
        positions, growth = _subject_surfaces(spec, i, template, directions)
        (in1, out1), (in3, out3), (in6, out6) = positions
        o3_inner, o3_outer, o6_inner, o6_outer = growth
        growth_mags = [
            np.linalg.norm(arr, axis=1).max()
            for arr in (o3_inner, o3_outer, o6_inner, o6_outer)
        ]
        if max(growth_mags) > spec.growth.max_growth:
            raise ValueError(
                f"subject {i}: growth magnitude {max(growth_mags):.3f} mm "
                f"exceeds the configured bound {spec.growth.max_growth} mm"
            )
        subject_id = f"s{i:03d}"

        def pair(inner_pos, outer_pos):
            return SurfacePair(
                template.with_positions(inner_pos),
                template.with_positions(outer_pos),
            )

        sample = LongitudinalSample(
            subject_id=subject_id,
            month1=pair(in1, out1),
            month3=pair(in3, out3) if has_m3[i] else None,
            month6=pair(in6, out6) if has_m6[i] else None,
        )
        samples.append(sample)
        truths[subject_id] = GrowthMaps(
            o3_inner=o3_inner, o3_outer=o3_outer,
            o6_inner=o6_inner, o6_outer=o6_outer,
        )
    return samples, truths


def cohort_report(samples):
    """Availability counts plus per-month mean thickness and displacement."""
    counts = {
        "subjects": len(samples),
        "complete": sum(s.flag3 and s.flag6 for s in samples),
        "month3_only": sum(s.flag3 and not s.flag6 for s in samples),
        "month6_only": sum(s.flag6 and not s.flag3 for s in samples),
    }
    mean_thickness = {}
    mean_displacement = {}
    for month in (1, 3, 6):
        thicknesses = [
            thickness(s.pair_at(month)).mean()
            for s in samples
            if s.pair_at(month) is not None
        ]
        if thicknesses:
            mean_thickness[month] = float(np.mean(thicknesses))
    for month, prev in ((3, 1), (6, 3)):
        mags = []
        for s in samples:
            cur = s.pair_at(month)
            ref = s.pair_at(prev) or s.month1
            if cur is None:
                continue
            for side in ("inner", "outer"):
                delta = getattr(cur, side).positions - getattr(ref, side).positions
                mags.append(np.linalg.norm(delta, axis=1).mean())
        if mags:
            mean_displacement[month] = float(np.mean(mags))
    return {
        "counts": counts,
        "mean_thickness": mean_thickness,
        "mean_displacement": mean_displacement,
    }


# ---------------------------------------------------------------------------
# Disk layout
# ---------------------------------------------------------------------------

def write_cohort(samples, directory, spec=None):
    """One directory per subject with OFF meshes plus a manifest."""
    os.makedirs(directory, exist_ok=True)
    lines = ["# surfgrow cohort manifest"]
    if spec is not None:
        lines.append(f"seed = {spec.seed}")
        lines.append(f"mesh_level = {spec.mesh_level}")
    lines.append(f"subjects = {len(samples)}")
    for i, sample in enumerate(samples):
        subject_dir = os.path.join(directory, sample.subject_id)
        os.makedirs(subject_dir, exist_ok=True)
        for month in (1, 3, 6):
            pair = sample.pair_at(month)
            if pair is None:
                continue
            save_mesh(pair.inner, os.path.join(subject_dir, f"inner_m{month}.off"))
            save_mesh(pair.outer, os.path.join(subject_dir, f"outer_m{month}.off"))
        seed_part = f" {spec.seed}:{i}" if spec is not None else ""
        lines.append(f"{sample.subject_id} {sample.flag3} {sample.flag6}{seed_part}")
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_cohort(directory):
    """Load a cohort written by :func:`write_cohort`."""
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest.txt in {directory}")
    samples = []
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or "=" in line:
                continue
            parts = line.split()
            subject_id, flag3, flag6 = parts[0], int(parts[1]), int(parts[2])
            subject_dir = os.path.join(directory, subject_id)

            def pair(month):
                return SurfacePair(
                    load_mesh(os.path.join(subject_dir, f"inner_m{month}.off")),
                    load_mesh(os.path.join(subject_dir, f"outer_m{month}.off")),
                )

            samples.append(
                LongitudinalSample(
                    subject_id=subject_id,
                    month1=pair(1),
                    month3=pair(3) if flag3 else None,
                    month6=pair(6) if flag6 else None,
                )
            )
    return samples
