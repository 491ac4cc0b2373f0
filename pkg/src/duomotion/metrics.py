"""Interaction metric suite and report writers.

All position metrics are reported in millimeters.  Conventions:

- GE: no alignment (absolute scene error).
- MPJPE: per-person, per-frame pelvis alignment.
- PA-MPJPE: per-person, per-frame similarity (Procrustes) alignment.
- RE: both persons aligned to person 1's pelvis, prediction and ground truth
  separately (relative layout error).
- Int: mean absolute error of corresponding-joint inter-person distances; a
  cross-distance-matrix variant is available behind a flag.
- Smoothness: mean squared error between predicted and ground-truth joint
  accelerations (central second differences), reported per frame^2.
- VPE (capsule): pelvis-aligned mean vertex error over the capsule surface.
- Pen: accumulated penetration depth of each person's surface inside the
  other's capsule body, averaged over persons and frames.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import procrustes_align
from .body import (Camera, MotionSequence, capsule_mesh, capsule_segments,
                   load_default_tree, motion_joints)
from .collision import penetration_metric
from .fileio import check_schema, read_json, write_json

REPORT_SCHEMA_VERSION = 1
METRIC_COLUMNS = ("mpjpe", "pa_mpjpe", "mpvpe", "ge", "re", "int",
                  "smoothness", "pen")


def _mm(x: float) -> float:
    return 1000.0 * x


def mpjpe(pred: np.ndarray, gt: np.ndarray, alignment: str = "root") -> float:
    """Mean per-joint position error in mm under the chosen alignment.

    pred, gt: (2, L, 24, 3) meters.  Alignments: none | root | procrustes |
    first-person-root.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 4:
        raise ValueError("pred and gt must share shape (persons, L, joints, 3)")

    if alignment == "none":
        p, g = pred, gt
    elif alignment == "root":
        p = pred - pred[:, :, :1]
        g = gt - gt[:, :, :1]
    elif alignment == "first-person-root":
        p = pred - pred[:1, :, :1]
        g = gt - gt[:1, :, :1]
    elif alignment == "procrustes":
        errs = []
        for person in range(pred.shape[0]):
            for frame in range(pred.shape[1]):
                tf = procrustes_align(pred[person, frame], gt[person, frame])
                aligned = tf.apply(pred[person, frame])
                errs.append(np.linalg.norm(aligned - gt[person, frame], axis=-1))
        return _mm(float(np.mean(errs)))
    else:
        raise ValueError(f"unknown alignment: {alignment!r}")
    return _mm(float(np.linalg.norm(p - g, axis=-1).mean()))


def interaction_error(pred_a, pred_b, gt_a, gt_b, cross_matrix: bool = False) -> float:
    """Mean |predicted - true| inter-person joint distance, in mm.

    With ``cross_matrix`` the error runs over all joint pairs (K x K) instead
    of corresponding joints only.
    """
    pred_a, pred_b = np.asarray(pred_a), np.asarray(pred_b)
    gt_a, gt_b = np.asarray(gt_a), np.asarray(gt_b)
    if not (pred_a.shape == pred_b.shape == gt_a.shape == gt_b.shape):
        raise ValueError("all four joint arrays must share a shape")
    if cross_matrix:
        d_pred = np.linalg.norm(pred_a[:, :, None] - pred_b[:, None, :], axis=-1)
        d_gt = np.linalg.norm(gt_a[:, :, None] - gt_b[:, None, :], axis=-1)
    else:
        d_pred = np.linalg.norm(pred_a - pred_b, axis=-1)
        d_gt = np.linalg.norm(gt_a - gt_b, axis=-1)
    return _mm(float(np.abs(d_pred - d_gt).mean()))


def smoothness(pred: np.ndarray, gt: np.ndarray) -> float:
    """MSE between predicted and true joint accelerations, mm/frame^2 scale.

    Accelerations are central second differences over interior frames.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must share a shape")
    if pred.shape[-3] < 3:
        raise ValueError("smoothness needs at least 3 frames")
    acc_p = np.diff(pred, n=2, axis=-3)
    acc_g = np.diff(gt, n=2, axis=-3)
    return float((np.linalg.norm(_mm(1.0) * (acc_p - acc_g), axis=-1) ** 2).mean())


@dataclass
class MetricReport:
    clip_ids: list = field(default_factory=list)
    rows: list = field(default_factory=list)        # list of dicts, METRIC_COLUMNS
    config_hash: str = ""

    @property
    def clip_count(self) -> int:
        return len(self.rows)

    def add(self, clip_id: str, row: dict):
        if set(row) != set(METRIC_COLUMNS):
            raise ValueError("metric row has wrong columns")
        if any(v < 0 or not np.isfinite(v) for v in row.values()):
            raise ValueError("metric values must be finite and >= 0")
        self.clip_ids.append(clip_id)
        self.rows.append({k: float(row[k]) for k in METRIC_COLUMNS})

    def aggregate(self) -> dict:
        if not self.rows:
            return {k: 0.0 for k in METRIC_COLUMNS}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in METRIC_COLUMNS}


def evaluate_clip(pred: MotionSequence, gt: MotionSequence,
                  camera: Camera | None = None, cross_matrix_int: bool = False,
                  tessellation: tuple | None = None) -> dict:
    """All eight metrics for one clip; returns a MetricReport row."""
    if len(pred.persons) != 2 or len(gt.persons) != 2:
        raise ValueError("evaluation expects exactly two persons")
    tree = load_default_tree()
    jp = np.stack([motion_joints(tree, p) for p in pred.persons])
    jg = np.stack([motion_joints(tree, p) for p in gt.persons])

    segments = tessellation if tessellation else (tree.segments, tree.rings)

    verts_p, verts_g = [], []
    segs_p = [[], []]
    for person in range(2):
        vp, vg = [], []
        for frame in range(pred.frames):
            mesh_p = capsule_mesh(tree, jp[person, frame],
                                  segments=segments[0], rings=segments[1])
            mesh_g = capsule_mesh(tree, jg[person, frame],
                                  segments=segments[0], rings=segments[1])
            vp.append(mesh_p.vertices)
            vg.append(mesh_g.vertices)
            segs_p[person].append(capsule_segments(tree, jp[person, frame]))
        verts_p.append(np.stack(vp))
        verts_g.append(np.stack(vg))

    # pelvis-aligned vertex error over the capsule surface
    vpe = 0.0
    for person in range(2):
        pv = verts_p[person] - jp[person, :, :1]
        gv = verts_g[person] - jg[person, :, :1]
        vpe += float(np.linalg.norm(pv - gv, axis=-1).mean())
    vpe = _mm(vpe / 2.0)

    pen = penetration_metric(segs_p[0], verts_p[0], segs_p[1], verts_p[1])

    return {
        "mpjpe": mpjpe(jp, jg, "root"),
        "pa_mpjpe": mpjpe(jp, jg, "procrustes"),
        "mpvpe": vpe,
        "ge": mpjpe(jp, jg, "none"),
        "re": mpjpe(jp, jg, "first-person-root"),
        "int": interaction_error(jp[0], jp[1], jg[0], jg[1],
                                 cross_matrix=cross_matrix_int),
        "smoothness": smoothness(jp, jg),
        "pen": pen,
    }


# -- report files ----------------------------------------------------------------


def write_report(path, report: MetricReport) -> None:
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config_hash": report.config_hash,
        "clip_count": report.clip_count,
        "per_clip": [{"clip_id": cid, **row}
                     for cid, row in zip(report.clip_ids, report.rows)],
        "aggregate": report.aggregate(),
    }
    write_json(path, doc)


def read_report(path) -> MetricReport:
    doc = read_json(path)
    check_schema(doc, REPORT_SCHEMA_VERSION, "metric report")
    report = MetricReport(config_hash=doc["config_hash"])
    for row in doc["per_clip"]:
        report.add(row["clip_id"], {k: row[k] for k in METRIC_COLUMNS})
    return report


def write_report_csv(path, report: MetricReport) -> None:
    """Flat CSV companion: clip_id column then METRIC_COLUMNS order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("clip_id",) + METRIC_COLUMNS)
        for cid, row in zip(report.clip_ids, report.rows):
            writer.writerow([cid] + [repr(row[k]) for k in METRIC_COLUMNS])
        writer.writerow(["aggregate"] +
                        [repr(report.aggregate()[k]) for k in METRIC_COLUMNS])
