"""Keypoint and pose evaluation metrics, plus the end-to-end test-set pipeline.

The combined pose score follows the public challenge convention: translation
error normalized by true range plus the rotation geodesic angle in radians
(lower is better).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import networks as nets
from .geometry import DegenerateGeometryError, Pose

log = logging.getLogger(__name__)

PCK_THRESHOLD_PX = 5.0


@dataclass(frozen=True)
class MetricsReport:
    kerror_px: float
    pck_pct: float
    range_error_frac: float
    attitude_error_deg: float
    esa_score: float
    n_samples: int

    CSV_COLUMNS = ("kerror_px", "pck_pct", "range_error_frac",
                   "attitude_error_deg", "esa_score", "n_samples")

    def csv_row(self):
        return (f"{self.kerror_px!r},{self.pck_pct!r},{self.range_error_frac!r},"
                f"{self.attitude_error_deg!r},{self.esa_score!r},{self.n_samples}")


def _points_array(points):
    if isinstance(points, np.ndarray):
        return np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.array([[p.u, p.v] for p in points], dtype=np.float64)


def kerror(pred, gt) -> float:
    """Mean Euclidean keypoint distance in pixels."""
    p, g = _points_array(pred), _points_array(gt)
    if len(p) != len(g):
        raise ValueError(f"keypoint count mismatch: {len(p)} vs {len(g)}")
    return float(np.linalg.norm(p - g, axis=1).mean())


def pck(pred, gt, threshold_px: float = PCK_THRESHOLD_PX) -> float:
    """Percent of keypoints with distance strictly below the threshold."""
    p, g = _points_array(pred), _points_array(gt)
    if len(p) != len(g):
        raise ValueError(f"keypoint count mismatch: {len(p)} vs {len(g)}")
    d = np.linalg.norm(p - g, axis=1)
    return float(100.0 * np.mean(d < threshold_px))


def range_error(t_est, t_gt) -> float:
    """| ||t_est|| - ||t_gt|| | / ||t_gt||."""
    r_gt = float(np.linalg.norm(t_gt))
    if r_gt <= 0:
        raise ValueError("ground-truth range is zero")
    return abs(float(np.linalg.norm(t_est)) - r_gt) / r_gt


def _unit_quat(q):
    arr = q.as_array()
    n = np.linalg.norm(arr)
    if abs(n - 1.0) > 1e-3:
        raise ValueError(f"quaternion norm {n} too far from 1")
    return q.normalized()


def attitude_error(q_est, q_gt) -> float:
    """Geodesic angle in degrees, invariant to the q/-q double cover."""
    return geo.rotation_angle_deg(_unit_quat(q_est), _unit_quat(q_gt))


def esa_score(pose_est: Pose, pose_gt: Pose) -> float:
    """Normalized translation error plus attitude geodesic in radians."""
    t_term = float(np.linalg.norm(pose_est.translation - pose_gt.translation)
                   / np.linalg.norm(pose_gt.translation))
    r_term = math.radians(attitude_error(pose_est.rotation, pose_gt.rotation))
    return t_term + r_term


@dataclass(frozen=True)
class PnPConfig:
    refine: bool = True
    soft_argmax_beta: float = 100.0


def predict_keypoints_full(bundle, sample, beta=100.0) -> np.ndarray:
    """f_i forward + soft-argmax decode, mapped to full-image pixels; (N,2)."""
    from .autodiff import Tensor

    feats = nets.forward_features(bundle, Tensor(sample.image[None, None]))
    heatmaps = nets.forward_head_invariant(bundle, feats).data[0]
    crop_uv = nets.decode_heatmaps(heatmaps, bundle.arch, beta=beta)
    return sample.crop_transform.to_full(crop_uv)


def pose_from_keypoints(scene, keypoints_full, config: PnPConfig = PnPConfig()):
    """PnP solve (+ refinement) from full-image keypoints; None on degeneracy."""
    try:
        pose = geo.solve_pnp(scene.K, scene.keypoint_model, keypoints_full)
        if config.refine:
            pose = geo.refine_pose(pose, scene.K, scene.keypoint_model,
                                   keypoints_full).pose
        return pose
    except (DegenerateGeometryError, geo.BehindCameraError):
        return None


def evaluate_pipeline(bundle, testset, scene, pnp_config: PnPConfig = PnPConfig(),
                      pck_threshold: float = PCK_THRESHOLD_PX,
                      keypoint_override=None) -> MetricsReport:
    """Full pipeline metrics over a test set.

    ``keypoint_override(sample) -> (N,2) full-image keypoints`` replaces the
    learned regressor (used for the ground-truth bypass check). PnP failures
    are counted at worst-case attitude (180 deg, unit range error), not
    dropped.
    """
    if not testset:
        raise ValueError("empty test set")
    kerrs, pcks, rerrs, aerrs, esas = [], [], [], [], []
    for sample in testset:
        if keypoint_override is not None:
            pred_full = np.asarray(keypoint_override(sample), dtype=np.float64)
        else:
            pred_full = predict_keypoints_full(bundle, sample,
                                               beta=pnp_config.soft_argmax_beta)
        gt_full = sample.crop_transform.to_full(
            np.array([[p.u, p.v] for p in sample.keypoints2d]))
        kerrs.append(kerror(pred_full, gt_full))
        pcks.append(pck(pred_full, gt_full, pck_threshold))
        pose = pose_from_keypoints(scene, pred_full, pnp_config)
        if pose is None:
            log.warning("PnP degenerate on sample %d; counted at worst case",
                        sample.index)
            rerrs.append(1.0)
            aerrs.append(180.0)
            esas.append(1.0 + math.pi)
            continue
        rerrs.append(range_error(pose.translation, sample.pose.translation))
        aerrs.append(attitude_error(pose.rotation, sample.pose.rotation))
        esas.append(esa_score(pose, sample.pose))
    return MetricsReport(
        kerror_px=float(np.mean(kerrs)),
        pck_pct=float(np.mean(pcks)),
        range_error_frac=float(np.mean(rerrs)),
        attitude_error_deg=float(np.mean(aerrs)),
        esa_score=float(np.mean(esas)),
        n_samples=len(testset),
    )
