"""Evaluation metrics: aligned point errors, PCK AUC, F-scores, acceleration, consistency."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

PCK_MAX_MM = 50.0
PCK_STEPS = 100
F_THRESHOLDS_MM = (5.0, 15.0)


class AlignmentError(ValueError):
    pass


def procrustes_align(pred, gt):
    """Least-squares similarity (proper rotation, scale, translation) mapping ``pred`` onto ``gt``.

    Returns ``(aligned, (scale, rot, trans))`` with ``aligned = scale * pred @ rot.T + trans``.
    """
    p = np.asarray(pred, dtype=float).reshape(-1, 3)
    g = np.asarray(gt, dtype=float).reshape(-1, 3)
    if p.shape != g.shape:
        raise ValueError(f"point count mismatch: {p.shape[0]} vs {g.shape[0]}")
    if len(p) < 3:
        raise AlignmentError("need at least 3 points to align")
    mp, mg = p.mean(axis=0), g.mean(axis=0)
    p0, g0 = p - mp, g - mg
    sv_g = np.linalg.svd(g0, compute_uv=False)
    sv_p = np.linalg.svd(p0, compute_uv=False)
    tol = 1e-9 * max(sv_g[0], sv_p[0], 1e-300)
    if sv_g[1] <= tol or sv_p[1] <= tol:
        raise AlignmentError("degenerate point configuration (rank < 2)")
    # Umeyama: maximise tr(R^T g0^T p0) over proper rotations
    u, s, vt = np.linalg.svd(g0.T @ p0)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float(np.sum(s * d) / np.sum(p0 * p0))
    trans = mg - scale * rot @ mp
    aligned = scale * p @ rot.T + trans
    return aligned, (scale, rot, trans)


def mean_point_error(pred, gt, align: bool = False) -> float:
    """Mean Euclidean distance in cm for inputs in metres, optionally Procrustes-aligned.

    Accepts a single set ``(n, 3)`` or frames ``(t, n, 3)`` (aligned per frame).
    """
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if p.ndim == 2:
        p, g = p[None], g[None]
    if align:
        p = np.stack([procrustes_align(a, b)[0] for a, b in zip(p, g)])
    return float(np.linalg.norm(p - g, axis=-1).mean() * 100.0)


def point_distances_mm(pred, gt, align: bool = False) -> np.ndarray:
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.ndim == 2:
        p, g = p[None], g[None]
    if align:
        p = np.stack([procrustes_align(a, b)[0] for a, b in zip(p, g)])
    return np.linalg.norm(p - g, axis=-1) * 1000.0


def pck_curve(errors_mm, max_mm: float = PCK_MAX_MM, steps: int = PCK_STEPS):
    e = np.asarray(errors_mm, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("no errors given")
    if np.any(e < 0):
        raise ValueError("errors must be nonnegative")
    # one rounding per threshold, so errors given on the grid compare exactly
    thresholds = max_mm * np.arange(steps) / (steps - 1)
    pck = np.mean(e[None, :] <= thresholds[:, None], axis=1)
    return thresholds, pck


def pck_auc(errors_mm, max_mm: float = PCK_MAX_MM, steps: int = PCK_STEPS) -> float:
    """Trapezoidal area under the PCK curve on [0, max_mm], normalised to [0, 1]."""
    t, pck = pck_curve(errors_mm, max_mm, steps)
    return float(np.trapezoid(pck, t) / max_mm)


def f_score(pred, gt, tau_mm: float) -> float:
    """Harmonic mean of precision and recall at distance ``tau_mm`` (inputs in metres)."""
    p = np.asarray(pred, dtype=float).reshape(-1, 3)
    g = np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(p) == 0 or len(g) == 0:
        raise ValueError("f_score needs nonempty point sets")
    tau = tau_mm / 1000.0
    d_pg, _ = cKDTree(g).query(p)
    d_gp, _ = cKDTree(p).query(g)
    precision = float(np.mean(d_pg <= tau))
    recall = float(np.mean(d_gp <= tau))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def accelerations(joints, fps: float = 30.0) -> np.ndarray:
    """Second central differences ``(t-2, n, 3)`` in mm/s^2 from positions in metres."""
    j = np.asarray(joints, dtype=float)
    if j.ndim != 3 or j.shape[0] < 3:
        raise ValueError("acceleration needs at least 3 frames of (n, 3) points")
    if not fps > 0:
        raise ValueError("fps must be positive")
    return (j[2:] - 2.0 * j[1:-1] + j[:-2]) * fps * fps * 1000.0


def acceleration_metrics(pred, gt=None, fps: float = 30.0):
    """Mean acceleration magnitude and, with ground truth, mean acceleration error (mm/s^2)."""
    ap = accelerations(pred, fps)
    acc = float(np.linalg.norm(ap, axis=-1).mean())
    if gt is None:
        return acc, None
    ag = accelerations(gt, fps)
    if ag.shape != ap.shape:
        raise ValueError("prediction and ground truth frame counts differ")
    return acc, float(np.linalg.norm(ap - ag, axis=-1).mean())


def consistency_sd(lighted, shapes):
    """Mean per-dimension population S.D. of lighted textures and shapes across frames.

    Returns ``(texture_sd, shape_sd, per_face)`` where ``per_face`` is ``(F, 3)`` in 0-255 units.
    """
    c = np.asarray(lighted, dtype=float)
    b = np.asarray(shapes, dtype=float)
    if c.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("consistency needs at least 2 frames")
    sd_c = c.std(axis=0)
    sd_b = b.std(axis=0)
    return float(sd_c.mean()), float(sd_b.mean()), sd_c.reshape(c.shape[1], -1) * 255.0


@dataclass
class MetricsReport:
    mpjpe_cm: float | None = None
    mpvpe_cm: float | None = None
    auc_j: float | None = None
    auc_v: float | None = None
    f5: float | None = None
    f15: float | None = None
    acc: float | None = None
    acc_err: float | None = None
    quat_loss: float | None = None
    texture_sd: float | None = None
    shape_sd: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def evaluate(pred_joints, pred_verts=None, gt_joints=None, gt_verts=None, fps: float = 30.0,
             lighted=None, shapes=None, quat_loss=None) -> MetricsReport:
    """Assemble the report; fields needing ground truth are left out when it is absent."""
    rep = MetricsReport()
    pj = np.asarray(pred_joints, dtype=float)
    if gt_joints is not None:
        gj = np.asarray(gt_joints, dtype=float)
        if gj.shape != pj.shape:
            raise ValueError(f"prediction has {pj.shape[0]} frames, ground truth {gj.shape[0]}")
        rep.mpjpe_cm = mean_point_error(pj, gj, align=True)
        rep.auc_j = pck_auc(point_distances_mm(pj, gj, align=True))
    if pred_verts is not None and gt_verts is not None:
        pv = np.asarray(pred_verts, dtype=float)
        gv = np.asarray(gt_verts, dtype=float)
        if gv.shape != pv.shape:
            raise ValueError("vertex prediction and ground truth shapes differ")
        rep.mpvpe_cm = mean_point_error(pv, gv, align=True)
        rep.auc_v = pck_auc(point_distances_mm(pv, gv, align=True))
        aligned = [procrustes_align(a, b)[0] for a, b in zip(pv, gv)]
        rep.f5 = float(np.mean([f_score(a, b, F_THRESHOLDS_MM[0]) for a, b in zip(aligned, gv)]))
        rep.f15 = float(np.mean([f_score(a, b, F_THRESHOLDS_MM[1]) for a, b in zip(aligned, gv)]))
    if pj.shape[0] >= 3:
        rep.acc, rep.acc_err = acceleration_metrics(pj, gt_joints, fps)
    if lighted is not None and shapes is not None and len(shapes) >= 2:
        rep.texture_sd, rep.shape_sd, _ = consistency_sd(lighted, shapes)
    rep.quat_loss = quat_loss
    return rep
