"""Population affine growth baseline.

Fits one affine transform per transition (month 1 to 3, month 3 to 6) and
per surface channel by stacking corresponding vertices across all training
subjects that have the transition, then applies the chained transforms to a
test baseline. This is the only affine protocol that needs nothing from the
test subject beyond its baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import SurfacePair

__all__ = ["AffineTransform", "fit_affine", "af_predict"]


@dataclass(frozen=True)
class AffineTransform:
    """x -> linear @ x + translation."""

    linear: np.ndarray       # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        if self.linear.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("affine transform must be 3x3 plus a 3-vector")
        if not (np.isfinite(self.linear).all() and np.isfinite(self.translation).all()):
            raise ValueError("affine transform entries must be finite")

    def apply(self, points):
        return points @ self.linear.T + self.translation


def fit_affine(source, target):
    """Least-squares affine from source points to target points.

    Solves the normal equations on homogeneous coordinates. Requires at
    least 4 non-coplanar source points.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise ValueError("source and target must be matching (N, 3) arrays")
    if source.shape[0] < 4:
        raise ValueError("need at least 4 point pairs")
    ones = np.ones((source.shape[0], 1))
    homo = np.concatenate([source, ones], axis=1)
    gram = homo.T @ homo
    if np.linalg.matrix_rank(gram) < 4:
        raise ValueError("source points are coplanar or degenerate")
    solution = np.linalg.solve(gram, homo.T @ target)
    return AffineTransform(
        linear=np.ascontiguousarray(solution[:3].T),
        translation=solution[3].copy(),
    )


def fit_population_transforms(cohort):
    """Per-transition, per-channel affines stacked over training subjects.

    Returns ``{(month, channel): AffineTransform}`` with months 3 (fitted
    on flag-3 subjects, baseline to month 3) and 6 (fitted on subjects with
    both flags, month 3 to month 6). Raises when a transition has no
    training data. Stacking follows cohort order, but the least-squares
    solution is order-invariant.
    """
    transforms = {}
    for month, prev_month, need in ((3, 1, "flag3"), (6, 3, "both")):
        for channel in ("inner", "outer"):
            sources, targets = [], []
            for sample in cohort:
                if need == "flag3" and not sample.flag3:
                    continue
                if need == "both" and not (sample.flag3 and sample.flag6):
                    continue
                src_pair = sample.pair_at(prev_month)
                dst_pair = sample.pair_at(month)
                sources.append(getattr(src_pair, channel).positions)
                targets.append(getattr(dst_pair, channel).positions)
            if not sources:
                raise ValueError(
                    f"no training subject provides the month {prev_month} to "
                    f"{month} transition"
                )
            transforms[(month, channel)] = fit_affine(
                np.concatenate(sources), np.concatenate(targets)
            )
    return transforms


def af_predict(cohort, baseline):
    """Affine-baseline predictions at months 3 and 6 for a test baseline."""
    transforms = fit_population_transforms(cohort)
    return apply_transforms(transforms, baseline)


def apply_transforms(transforms, baseline):
    pred3 = SurfacePair(
        baseline.inner.with_positions(
            transforms[(3, "inner")].apply(baseline.inner.positions)
        ),
        baseline.outer.with_positions(
            transforms[(3, "outer")].apply(baseline.outer.positions)
        ),
    )
    pred6 = SurfacePair(
        pred3.inner.with_positions(
            transforms[(6, "inner")].apply(pred3.inner.positions)
        ),
        pred3.outer.with_positions(
            transforms[(6, "outer")].apply(pred3.outer.positions)
        ),
    )
    return {3: pred3, 6: pred6}
