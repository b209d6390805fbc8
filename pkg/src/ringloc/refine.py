"""Cone fitting, Tukey-weighted point-to-plane ICP, and the gated marker locator.

ICP convention: correspondences are searched from each *source* point to its
nearest *target* point and residuals are measured along the target normal;
the returned transform maps source onto target. :func:`locate_marker` uses
the ROI cloud as source and the ring template (exact normals) as target, then
inverts the result so that :attr:`MarkerPose.icp` holds template -> scene.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .cloud import RingTemplate, fit_plane
from .core import GeometryError, PointCloud, RigidTransform, RingSpec, compose, rotation_about

__all__ = [
    "ConeFit",
    "ConeFitError",
    "DegenerateFitError",
    "RobustIcpResult",
    "Quality",
    "MarkerPose",
    "LocateGates",
    "THETA_MIN",
    "cone_residual",
    "cone_jacobian",
    "fit_cone",
    "tukey_rho",
    "tukey_weight",
    "mad_scale",
    "icp_point_to_plane",
    "icp_tukey",
    "align_to_plane",
    "locate_marker",
]

log = logging.getLogger(__name__)

THETA_MIN = 1e-3
TUKEY_C = 4.685
# cones within this many radians of flat are treated as planes when placing the template
FLAT_CONE_MARGIN = 0.01


class ConeFitError(GeometryError):
    """Cone fit did not converge; ``last`` holds the final iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class DegenerateFitError(ConeFitError):
    pass


@dataclass(frozen=True)
class ConeFit:
    apex: np.ndarray
    half_angle: float
    rms: float
    inlier_count: int
    iterations: int = 0

    @property
    def params(self) -> np.ndarray:
        return np.array([*self.apex, self.half_angle])


@dataclass(frozen=True)
class RobustIcpResult:
    transform: RigidTransform
    rms_weighted: float
    iterations: int
    converged: bool
    mean_tukey_weight: float = 1.0
    correspondences: int = 0


class Quality(str, Enum):
    ACCEPTED = "accepted"
    REJECTED_CONE = "rejected_cone"
    REJECTED_ICP = "rejected_icp"


@dataclass(frozen=True)
class MarkerPose:
    center: np.ndarray
    normal: np.ndarray
    cone: ConeFit | None
    icp: RobustIcpResult | None
    quality: Quality
    cone_apex_camera: np.ndarray | None = None

    @property
    def accepted(self) -> bool:
        return self.quality is Quality.ACCEPTED

    def to_dict(self) -> dict:
        out = {
            "center": [float(c) for c in self.center],
            "normal": [float(c) for c in self.normal],
            "quality": self.quality.value,
            "cone": None,
            "icp": None,
        }
        if self.cone is not None:
            out["cone"] = {
                "apex": [float(c) for c in self.cone.apex],
                "apex_camera": None if self.cone_apex_camera is None else [float(c) for c in self.cone_apex_camera],
                "theta_deg": math.degrees(self.cone.half_angle),
                "rms": self.cone.rms,
                "inlier_count": self.cone.inlier_count,
            }
        if self.icp is not None:
            out["icp"] = {
                "rms": self.icp.rms_weighted,
                "iterations": self.icp.iterations,
                "mean_weight": self.icp.mean_tukey_weight,
                "converged": self.icp.converged,
                "transform": self.icp.transform.matrix.tolist(),
            }
        return out


@dataclass(frozen=True)
class LocateGates:
    cone_rms_max: float = 2.0
    icp_rms_max: float = 0.5
    k: float | None = None
    k_min: float = 1.0
    max_corr_dist: float | None = None
    max_iter: int = 60


# --- cone -----------------------------------------------------------------


def _check_theta(theta: float) -> None:
    if not THETA_MIN < theta < math.pi / 2 - THETA_MIN:
        raise GeometryError(f"cone half-angle {theta!r} outside ({THETA_MIN}, pi/2 - {THETA_MIN})")


def cone_residual(params, points) -> np.ndarray | float:
    """``z - (z0 + rho / tan(theta))`` for a z-aligned cone with apex ``(x0, y0, z0)``."""
    x0, y0, z0, theta = (float(p) for p in params)
    _check_theta(theta)
    pts = np.asarray(points, dtype=np.float64)
    rho = np.hypot(pts[..., 0] - x0, pts[..., 1] - y0)
    return pts[..., 2] - (z0 + rho / math.tan(theta))


def cone_jacobian(params, points) -> np.ndarray:
    """Analytic ``d residual / d (x0, y0, z0, theta)``, shape ``(n, 4)``.

    At the apex itself the radial term has a kink; its x0/y0 derivatives are
    taken as 0 there.
    """
    x0, y0, _, theta = (float(p) for p in params)
    _check_theta(theta)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dx = pts[:, 0] - x0
    dy = pts[:, 1] - y0
    rho = np.hypot(dx, dy)
    tan_t = math.tan(theta)
    safe = np.where(rho > 0, rho, 1.0)
    J = np.empty((len(pts), 4))
    J[:, 0] = np.where(rho > 0, dx / (safe * tan_t), 0.0)
    J[:, 1] = np.where(rho > 0, dy / (safe * tan_t), 0.0)
    J[:, 2] = -1.0
    J[:, 3] = rho / math.sin(theta) ** 2
    return J


def fit_cone(cloud, init=None, max_iter: int = 200, step_tol: float = 1e-9) -> ConeFit:
    """Levenberg-Marquardt fit of a z-aligned cone minimizing summed squared z residuals.

    Default start: apex xy at the centroid, ``z0 = min(z) - 1``, 60 degrees.
    Damping starts at 1e-3 and moves by x10 / /10 on rejected / accepted steps.
    Stops when the step norm drops below ``step_tol``, when an accepted step
    lowers the cost by less than 1e-12 relative, or when no damping level
    yields a downhill step.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 10:
        raise GeometryError("cone fit needs at least 10 points")
    if init is None:
        c = pts.mean(axis=0)
        p = np.array([c[0], c[1], pts[:, 2].min() - 1.0, math.radians(60.0)])
    else:
        p = np.asarray(init, dtype=np.float64).copy()
    lo, hi = THETA_MIN, math.pi / 2 - THETA_MIN
    p[3] = min(max(p[3], lo * 2), hi - lo)

    r = cone_residual(p, pts)
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = cone_jacobian(p, pts)
        A = J.T @ J
        g = J.T @ r
        accepted = stalled = False
        while lam < 1e16:
            D = np.diag(np.maximum(np.diag(A), 1e-12))
            try:
                step = -np.linalg.solve(A + lam * D, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = p + step
            if not lo < trial[3] < hi:
                lam *= 10.0
                continue
            r_new = cone_residual(trial, pts)
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                stalled = cost - cost_new <= 1e-12 * cost
                p, r, cost = trial, r_new, cost_new
                lam = max(lam / 10.0, 1e-15)
                accepted = True
                break
            lam *= 10.0
        if not accepted or np.linalg.norm(step) < step_tol or stalled:
            converged = True
            break

    rms = math.sqrt(cost / len(pts))
    fit = ConeFit(p[:3].copy(), float(p[3]), rms, len(pts), it)
    pinned = p[3] < lo * 10 or p[3] > hi - lo * 10
    if pinned:
        _, s, _ = np.linalg.svd(pts - pts.mean(axis=0), full_matrices=False)
        if s[2] <= 1e-6 * s[0]:
            raise DegenerateFitError("coplanar cloud drives the cone angle to its bound", fit)
    if not converged:
        raise ConeFitError(f"cone fit did not converge in {max_iter} iterations", fit)
    return fit


# --- Tukey biweight -------------------------------------------------------


def _check_k(k: float) -> None:
    if not k > 0:
        raise GeometryError(f"Tukey constant k must be positive, got {k!r}")


def tukey_rho(r, k: float):
    """Biweight loss ``k**2/6 * (1 - (1 - (r/k)**2)**3)``, saturating at ``k**2/6`` for ``|r| >= k``."""
    _check_k(k)
    r = np.asarray(r, dtype=np.float64)
    u2 = np.minimum((r / k) ** 2, 1.0)
    out = (k * k / 6.0) * (1.0 - (1.0 - u2) ** 3)
    return float(out) if out.ndim == 0 else out


def tukey_weight(r, k: float):
    """``(1 - (r/k)**2)**2`` inside ``|r| <= k``, zero outside."""
    _check_k(k)
    r = np.asarray(r, dtype=np.float64)
    u2 = (r / k) ** 2
    out = np.where(u2 <= 1.0, (1.0 - np.minimum(u2, 1.0)) ** 2, 0.0)
    return float(out) if out.ndim == 0 else out


def mad_scale(residuals) -> float:
    """Normal-consistent robust scale ``1.4826 * median(|r - median(r)|)``."""
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        return 0.0
    return 1.4826 * float(np.median(np.abs(r - np.median(r))))


# --- ICP -----------------------------------------------------------------


def _small_rigid(x: np.ndarray) -> RigidTransform:
    omega, delta = x[:3], x[3:]
    angle = float(np.linalg.norm(omega))
    R = np.eye(3) if angle < 1e-300 else rotation_about(omega, angle)
    return RigidTransform(R, delta)


def _icp(source, target, init, max_corr_dist, max_iter, k, tol=1e-8, tree=None):
    if not source.has_normals or not target.has_normals:
        raise GeometryError("point-to-plane ICP needs normals on both clouds")
    if not max_corr_dist > 0:
        raise GeometryError("max_corr_dist must be positive")
    if k is not None:
        _check_k(k)
    tree = tree or cKDTree(target.points)
    T = init or RigidTransform.identity()
    src = source.points
    prev_rms = None
    rms = math.inf
    mean_w = 0.0
    count = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = T.apply(src)
        dist, idx = tree.query(p, distance_upper_bound=max_corr_dist)
        ok = np.isfinite(dist)
        count = int(ok.sum())
        if count == 0:
            return RobustIcpResult(T, math.inf, it, False, 0.0, 0)
        p = p[ok]
        q = target.points[idx[ok]]
        n = target.normals[idx[ok]]
        r = np.einsum("ij,ij->i", n, p - q)
        w = np.ones_like(r) if k is None else tukey_weight(r, k)
        wsum = float(w.sum())
        if wsum <= 0:
            return RobustIcpResult(T, math.inf, it, False, 0.0, count)
        rms = math.sqrt(float(w @ (r * r)) / wsum)
        mean_w = wsum / count
        if prev_rms is not None and abs(prev_rms - rms) < tol:
            converged = True
            break
        prev_rms = rms
        J = np.hstack([np.cross(p, n), n])
        sw = np.sqrt(w)
        x, *_ = np.linalg.lstsq(J * sw[:, None], -r * sw, rcond=None)
        T = compose(_small_rigid(x), T)
        if np.linalg.norm(x) < 1e-12:
            converged = True
            break
    return RobustIcpResult(T, rms, it, converged, mean_w, count)


def icp_point_to_plane(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform | None = None,
    max_corr_dist: float = 6.0,
    max_iter: int = 60,
) -> RobustIcpResult:
    """Least-squares point-to-plane ICP with small-angle linearization.

    Stops when the RMS changes by less than 1e-8 between iterations.
    ``converged`` is False when an iteration finds no correspondences.
    """
    return _icp(source, target, init, max_corr_dist, max_iter, None)


def icp_tukey(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform | None = None,
    k: float = 1.0,
    max_corr_dist: float = 6.0,
    max_iter: int = 60,
) -> RobustIcpResult:
    """Iteratively reweighted point-to-plane ICP with Tukey biweights of the residuals."""
    _check_k(k)
    return _icp(source, target, init, max_corr_dist, max_iter, k)


def point_to_plane_residuals(source: PointCloud, target: PointCloud, transform: RigidTransform, max_corr_dist: float):
    """Signed residuals ``n . (T s - t)`` over the closest-point pairs ICP would use at ``transform``."""
    p = transform.apply(source.points)
    dist, idx = cKDTree(target.points).query(p, distance_upper_bound=max_corr_dist)
    ok = np.isfinite(dist)
    return np.einsum("ij,ij->i", target.normals[idx[ok]], p[ok] - target.points[idx[ok]])


# --- locator ---------------------------------------------------------------


def align_to_plane(cloud: PointCloud) -> RigidTransform:
    """Camera -> aligned frame: centroid to origin, camera-facing plane normal to +z."""
    c, n = fit_plane(cloud.points)
    if n @ (-c) < 0:
        n = -n
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(n, z)
    s = np.linalg.norm(axis)
    if s < 1e-15:
        R = np.eye(3) if n[2] > 0 else np.diag([1.0, -1.0, -1.0])
    else:
        R = rotation_about(axis, math.atan2(s, float(n @ z)))
    return RigidTransform(R, -R @ c)


def _rejected(quality, cone=None, icp=None, apex_cam=None, center=None, normal=None):
    return MarkerPose(
        center=np.full(3, np.nan) if center is None else center,
        normal=np.full(3, np.nan) if normal is None else normal,
        cone=cone,
        icp=icp,
        quality=quality,
        cone_apex_camera=apex_cam,
    )


def locate_marker(
    roi_cloud: PointCloud,
    template: RingTemplate,
    spec: RingSpec | None = None,
    gates: LocateGates | None = None,
) -> MarkerPose:
    """Cone fit then plain and Tukey ICP against the template, each stage gated.

    The template is placed at the cone apex in the plane-aligned frame. When
    the cloud is flat enough that the cone angle runs into its bound, or the
    cone fit stops without converging, the apex is not trustworthy in x/y and
    the cloud centroid is used instead.

    Gate failures come back as a rejected :class:`MarkerPose`; only an empty
    cloud raises.
    """
    spec = spec or template.spec
    gates = gates or LocateGates()
    if len(roi_cloud) == 0:
        raise GeometryError("empty ROI cloud")
    max_corr = gates.max_corr_dist or spec.outer_radius / 2.0

    try:
        to_aligned = align_to_plane(roi_cloud)
    except GeometryError:
        return _rejected(Quality.REJECTED_CONE)
    from_aligned = to_aligned.inverse()
    aligned = roi_cloud.transformed(to_aligned)
    if not aligned.has_normals:
        aligned = PointCloud(aligned.points, np.tile([0.0, 0.0, 1.0], (len(aligned), 1)))

    unreliable_apex = False
    try:
        cone = fit_cone(aligned)
    except (DegenerateFitError, ConeFitError) as exc:
        # a flat cloud pins the cone angle and a near-flat one can stall LM;
        # either way the last iterate still feeds the rms gate
        log.debug("cone fit did not converge cleanly: %s", exc)
        if exc.last is None:
            return _rejected(Quality.REJECTED_CONE)
        cone, unreliable_apex = exc.last, True
    except GeometryError as exc:
        log.debug("cone fit failed: %s", exc)
        return _rejected(Quality.REJECTED_CONE)
    apex_cam = from_aligned.apply(cone.apex)
    if not cone.rms <= gates.cone_rms_max:
        return _rejected(Quality.REJECTED_CONE, cone=cone, apex_cam=apex_cam)

    if unreliable_apex or cone.half_angle > math.pi / 2 - FLAT_CONE_MARGIN:
        # a (nearly) flat cone has no usable apex in x/y; seed at the cloud centroid
        seed = aligned.points[:, :2].mean(axis=0)
    else:
        seed = cone.apex[:2]
    place = RigidTransform(np.eye(3), (seed[0], seed[1], 0.0))
    placed = template.cloud.transformed(place)
    tree = cKDTree(placed.points)
    coarse = _icp(aligned, placed, None, max_corr, gates.max_iter, None, tree=tree)
    if not coarse.converged and not math.isfinite(coarse.rms_weighted):
        return _rejected(Quality.REJECTED_ICP, cone=cone, icp=coarse, apex_cam=apex_cam)

    k = gates.k
    if k is None:
        resid = point_to_plane_residuals(aligned, placed, coarse.transform, max_corr)
        k = max(TUKEY_C * mad_scale(resid), gates.k_min)
    fine = _icp(aligned, placed, coarse.transform, max_corr, gates.max_iter, k, tree=tree)

    # fine.transform maps aligned scene -> placed template; invert for template -> camera
    template_to_camera = compose(from_aligned, compose(fine.transform.inverse(), place))
    icp_report = replace(fine, transform=template_to_camera)
    center = template_to_camera.translation.copy()
    normal = template_to_camera.rotation[:, 2].copy()
    if not (fine.converged or math.isfinite(fine.rms_weighted)) or not fine.rms_weighted <= gates.icp_rms_max:
        return _rejected(Quality.REJECTED_ICP, cone=cone, icp=icp_report, apex_cam=apex_cam)
    return MarkerPose(center, normal, cone, icp_report, Quality.ACCEPTED, apex_cam)
