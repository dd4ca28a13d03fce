"""Median-absolute-error metrics and error-map export.

``mae_cs`` is the median over vertices of the Euclidean distance between
corresponding predicted and ground-truth vertices; ``mae_ct`` the median
absolute difference of the per-vertex thickness. Medians with an even count
average the two middle order statistics. Cohort-level numbers are
arithmetic means of per-subject medians across testing subjects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import thickness

__all__ = [
    "mae_cs",
    "mae_ct",
    "vertex_position_errors",
    "vertex_thickness_errors",
    "write_scalar_field",
    "read_scalar_field",
    "EvalReport",
]


def _check_same_size(a, b):
    if a.n_vertices != b.n_vertices:
        raise ValueError(
            f"vertex counts differ: {a.n_vertices} vs {b.n_vertices}"
        )


def vertex_position_errors(pred, truth):
    """Per-vertex Euclidean position error between corresponding meshes."""
    _check_same_size(pred, truth)
    return np.linalg.norm(pred.positions - truth.positions, axis=1)


def vertex_thickness_errors(pred, truth):
    """Per-vertex absolute thickness difference between two surface pairs."""
    _check_same_size(pred.inner, truth.inner)
    return np.abs(thickness(pred) - thickness(truth))


def mae_cs(pred, truth):
    """Median absolute vertex-position error (mm)."""
    return float(np.median(vertex_position_errors(pred, truth)))


def mae_ct(pred, truth):
    """Median absolute thickness error (mm)."""
    return float(np.median(vertex_thickness_errors(pred, truth)))


def write_scalar_field(values, path):
    """Scalar-field file: first line the count, then one value per line."""
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"{values.size}\n")
        for v in values:
            fh.write(f"{v:.9g}\n")


def read_scalar_field(path):
    with open(path) as fh:
        count = int(fh.readline())
        values = np.array([float(fh.readline()) for _ in range(count)])
    return values


@dataclass
class EvalReport:
    """Per-subject metrics plus cohort averages, Table-style formatting.

    ``per_subject[(subject, month)]`` holds a dict with keys ``mae_ct``,
    ``mae_cs_inner``, ``mae_cs_outer``.
    """

    method: str
    per_subject: dict = field(default_factory=dict)
    header: str = ""

    def add(self, subject, month, mae_ct_value, mae_cs_inner, mae_cs_outer):
        for v in (mae_ct_value, mae_cs_inner, mae_cs_outer):
            if v < 0:
                raise ValueError("MAE values cannot be negative")
        self.per_subject[(subject, month)] = {
            "mae_ct": mae_ct_value,
            "mae_cs_inner": mae_cs_inner,
            "mae_cs_outer": mae_cs_outer,
        }

    def months(self):
        return sorted({month for (_, month) in self.per_subject})

    def average(self, month, key):
        values = [
            row[key]
            for (_, m), row in sorted(self.per_subject.items())
            if m == month
        ]
        return float(np.mean(values))

    def to_text(self):
        lines = []
        if self.header:
            lines.extend("# " + ln for ln in self.header.splitlines())
        lines.append(
            f"{'Month':>5}  {'Method':>8}  {'MAE_ct (mm)':>12}  "
            f"{'Inner MAE_cs (mm)':>18}  {'Outer MAE_cs (mm)':>18}"
        )
        for month in self.months():
            lines.append(
                f"{month:>5}  {self.method:>8}  "
                f"{self.average(month, 'mae_ct'):>12.6f}  "
                f"{self.average(month, 'mae_cs_inner'):>18.6f}  "
                f"{self.average(month, 'mae_cs_outer'):>18.6f}"
            )
        lines.append("")
        lines.append("# per-subject medians")
        for (subject, month), row in sorted(self.per_subject.items()):
            lines.append(
                f"{subject} month={month} mae_ct={row['mae_ct']:.9g} "
                f"mae_cs_inner={row['mae_cs_inner']:.9g} "
                f"mae_cs_outer={row['mae_cs_outer']:.9g}"
            )
        return "\n".join(lines) + "\n"
