"""Trajectory error metrics: absolute (ATE) and relative per travelled metre (RTE).

Trajectories are :class:`rlio.simulator.Trajectory` objects (int ns stamps,
positions, rotation matrices).  Estimated poses are associated with the
nearest ground-truth stamp within a tolerance.
"""
from __future__ import annotations

import numpy as np

ASSOC_TOLERANCE_NS = 10_000_000


def associate(est_t: np.ndarray, gt_t: np.ndarray, tolerance_ns: int = ASSOC_TOLERANCE_NS):
    """Index pairs ``(i_est, i_gt)`` of nearest stamps within ``tolerance_ns``."""
    est_t = np.asarray(est_t, dtype=np.int64)
    gt_t = np.asarray(gt_t, dtype=np.int64)
    if len(est_t) == 0 or len(gt_t) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(gt_t, kind="stable")
    g = gt_t[order]
    k = np.searchsorted(g, est_t)
    lo = np.clip(k - 1, 0, len(g) - 1)
    hi = np.clip(k, 0, len(g) - 1)
    k = np.where(np.abs(est_t - g[lo]) <= np.abs(g[hi] - est_t), lo, hi)
    ok = np.abs(g[k] - est_t) <= tolerance_ns
    return np.flatnonzero(ok), order[k[ok]]


def umeyama_rigid(src: np.ndarray, dst: np.ndarray):
    """Rotation and translation minimizing ``sum |dst - (R src + t)|^2`` (no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def compute_ate(est, gt, align: bool = True, tolerance_ns: int = ASSOC_TOLERANCE_NS):
    """Mean and std of position error norms after optional rigid alignment."""
    ie, ig = associate(est.t, gt.t, tolerance_ns)
    if len(ie) < 2:
        raise ValueError(f"need at least 2 associated poses, found {len(ie)}")
    pe, pg = est.p[ie], gt.p[ig]
    if align:
        R, t = umeyama_rigid(pe, pg)
        pe = pe @ R.T + t
    err = np.linalg.norm(pe - pg, axis=1)
    return float(err.mean()), float(err.std())


def compute_rte_per_meter(est, gt, delta: float = 1.0,
                          tolerance_ns: int = ASSOC_TOLERANCE_NS):
    """Relative translation error over consecutive ``delta``-metre segments.

    Segments start at the first associated pose and end at the first pose
    whose ground-truth arc length from the start reaches ``delta``; the next
    segment starts there.  Each error is the norm of the difference between
    estimated and true relative translations, both expressed in their own
    start frames.
    """
    ie, ig = associate(est.t, gt.t, tolerance_ns)
    if len(ie) < 2:
        raise ValueError(f"need at least 2 associated poses, found {len(ie)}")
    pe, Re = est.p[ie], est.R[ie]
    pg, Rg = gt.p[ig], gt.R[ig]
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pg, axis=0), axis=1))])
    if arc[-1] < delta:
        raise ValueError(f"ground-truth path of {arc[-1]:.3f} m is shorter than {delta} m")
    errs = []
    i = 0
    while True:
        j = int(np.searchsorted(arc, arc[i] + delta))
        if j >= len(arc):
            break
        rel_e = Re[i].T @ (pe[j] - pe[i])
        rel_g = Rg[i].T @ (pg[j] - pg[i])
        errs.append(np.linalg.norm(rel_e - rel_g))
        i = j
    errs = np.asarray(errs)
    return float(errs.mean()), float(errs.std())
