"""Pose error metrics, aggregation, and report/trajectory export.

Errors follow the usual relocalization convention: per-frame translation
error in metres and rotation error in degrees, summarised by the per-scene
median and reported as ``median_t/median_r`` with two decimals.  Multi-scene
aggregates are the arithmetic mean of the per-scene medians, matching how
relocalization benchmarks combine scenes of different sizes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import write_pose_file
from .errors import DataError, UsageError
from .geometry import Pose


def translation_error_m(pred: Pose, gt: Pose) -> float:
    return float(np.linalg.norm(pred.x - gt.x))


def rotation_error_deg(pred: Pose, gt: Pose) -> float:
    """Geodesic rotation distance in degrees between two unit quaternions.

    Uses 2*arccos(|<p, q>|); the absolute value folds the double cover so q
    and -q describe the same rotation.  The dot product is clamped into
    [0, 1] so rounding above one never feeds arccos a NaN; identical
    quaternions report at most a sub-microdegree rounding residue.
    """
    dot = abs(float(np.dot(pred.q, gt.q)))
    dot = min(dot, 1.0)
    return float(np.degrees(2.0 * np.arccos(dot)))


@dataclass
class SceneMetrics:
    name: str
    median_t: float
    median_r: float
    n_frames: int

    def formatted(self) -> str:
        return f"{self.median_t:.2f}/{self.median_r:.2f}"


def median_low(values) -> float:
    """Median that returns an actual element (lower of the two middles).

    Reported medians stay attached to a real frame this way, which keeps
    error tables reproducible without interpolation conventions.
    """
    ordered = sorted(float(v) for v in values)
    if not ordered:
        raise DataError("median of empty sequence")
    return ordered[(len(ordered) - 1) // 2]


def evaluate_scene(name: str, predictions: list[Pose], ground_truth: list[Pose]) -> SceneMetrics:
    if len(predictions) != len(ground_truth):
        raise DataError(f"{name}: {len(predictions)} predictions but {len(ground_truth)} ground-truth poses")
    if not predictions:
        raise DataError(f"{name}: no frames to evaluate")
    t_errs = [translation_error_m(p, g) for p, g in zip(predictions, ground_truth)]
    r_errs = [rotation_error_deg(p, g) for p, g in zip(predictions, ground_truth)]
    return SceneMetrics(name=name, median_t=median_low(t_errs), median_r=median_low(r_errs), n_frames=len(predictions))


def aggregate(scenes: list[SceneMetrics]) -> tuple[float, float]:
    """Mean of the per-scene medians (translation, rotation)."""
    if not scenes:
        raise UsageError("no scenes to aggregate")
    return (
        float(np.mean([s.median_t for s in scenes])),
        float(np.mean([s.median_r for s in scenes])),
    )


def format_report(scenes: list[SceneMetrics]) -> str:
    lines = [
        "# per-scene medians (lower-middle order statistic); average = mean of medians",
        "scene\tframes\tmedian_t_m/median_r_deg",
    ]
    for s in scenes:
        lines.append(f"{s.name}\t{s.n_frames}\t{s.formatted()}")
    mean_t, mean_r = aggregate(scenes)
    lines.append(f"average\t{sum(s.n_frames for s in scenes)}\t{mean_t:.2f}/{mean_r:.2f}")
    return "\n".join(lines) + "\n"


def write_report(path, scenes: list[SceneMetrics]) -> None:
    Path(path).write_text(format_report(scenes))


def export_trajectory(out_dir, predictions: list[Pose], ground_truth: list[Pose]) -> None:
    """Write predicted and ground-truth pose files plus a per-frame error CSV."""
    if len(predictions) != len(ground_truth):
        raise DataError(f"{len(predictions)} predictions but {len(ground_truth)} ground-truth poses")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pose_file(out / "pred_poses.txt", predictions)
    write_pose_file(out / "gt_poses.txt", ground_truth)
    with open(out / "errors.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "translation_m", "rotation_deg"])
        for i, (p, g) in enumerate(zip(predictions, ground_truth)):
            writer.writerow([i, f"{translation_error_m(p, g):.17g}", f"{rotation_error_deg(p, g):.17g}"])
