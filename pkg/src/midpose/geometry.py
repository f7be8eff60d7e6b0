"""Rigid transforms, pinhole projection, 3D boxes, PnP and depth backprojection.

Conventions used throughout the package:

* Camera frame: x right, y down, z forward along the optical axis.
* Object frame: x points out of the object's front, z up.
* A view (azimuth, elevation) places the camera on the direction
  ``(cos el cos az, cos el sin az, sin el)`` from the object centre, looking
  at it with no roll.  Azimuth 0 is the frontal view and grows
  counter-clockwise seen from above; elevation is positive above the
  object's horizontal plane.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (BehindCameraError, ConfigurationError, DegenerateConfigurationError,
                     PnPConvergenceError)

ORTHO_TOL = 1e-9

# sign pattern of the eight box corners, in the fixed enumeration order
CORNER_SIGNS = np.array([
    [+1, +1, +1],
    [-1, +1, +1],
    [+1, -1, +1],
    [-1, -1, +1],
    [+1, +1, -1],
    [-1, +1, -1],
    [+1, -1, -1],
    [-1, -1, -1],
], dtype=float)


@dataclass(frozen=True)
class RigidTransform:
    """``x_to = rotation @ x_from + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def validate(self, tol=ORTHO_TOL):
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1) > tol:
            raise ConfigurationError("rotation is not orthonormal with det +1")
        return self

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError("principal point outside the image")

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class Bbox3D:
    center: np.ndarray
    dims: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "dims", np.asarray(self.dims, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        if np.any(self.dims <= 0):
            raise ConfigurationError("box dimensions must be positive")

    def pose(self):
        """Object-to-world transform of the box frame."""
        return RigidTransform(self.rotation, self.center)


@dataclass(frozen=True)
class ViewAngles:
    azimuth: float
    elevation: float

    def __post_init__(self):
        if not -90.0 <= self.elevation <= 90.0:
            raise ConfigurationError(f"elevation {self.elevation} outside [-90, 90]")
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)


def rot_x(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def invert_transform(t):
    r = t.rotation.T
    return RigidTransform(r, -r @ t.translation)


def rotation_geodesic(r1, r2):
    """Angle in radians of ``r1.T @ r2``; accurate for tiny angles too."""
    d = np.linalg.norm(np.asarray(r1) - np.asarray(r2))
    return float(2.0 * np.arcsin(min(d / (2.0 * np.sqrt(2.0)), 1.0)))


def bbox_corners(box):
    """World-frame corners ``c + R @ (s * D / 2)`` in :data:`CORNER_SIGNS` order."""
    local = CORNER_SIGNS * (box.dims / 2.0)
    return local @ box.rotation.T + box.center


def project_points(points3d, camera, K):
    """Project world points through a world->camera transform to pixels (u, v)."""
    pc = camera.apply(np.atleast_2d(points3d))
    bad = np.flatnonzero(pc[:, 2] <= 0)
    if bad.size:
        raise BehindCameraError(int(bad[0]), float(pc[bad[0], 2]))
    u = K.fx * pc[:, 0] / pc[:, 2] + K.cx
    v = K.fy * pc[:, 1] / pc[:, 2] + K.cy
    return np.stack([u, v], axis=1)


def backproject_depth(depth, K, pose=None, stride=1):
    """World points for every valid (non-zero, finite) depth pixel.

    ``pose`` maps camera to world; identity when omitted.  Pixel ``(u, v)``
    sits at column ``u``, row ``v`` with its centre at the integer coordinate.
    """
    depth = np.asarray(depth, dtype=float)
    vs, us = np.mgrid[0:depth.shape[0]:stride, 0:depth.shape[1]:stride]
    d = depth[vs, us]
    valid = np.isfinite(d) & (d > 0)
    u, v, d = us[valid].astype(float), vs[valid].astype(float), d[valid]
    pc = np.stack([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d], axis=1)
    return pc if pose is None else pose.apply(pc)


def _skew(w):
    return np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])


def _expmap(w):
    th = np.linalg.norm(w)
    k = _skew(w)
    if th < 1e-12:
        return np.eye(3) + k
    return np.eye(3) + np.sin(th) / th * k + (1 - np.cos(th)) / th**2 * (k @ k)


def _nearest_rotation(m):
    u, s, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r, s


def _dlt(xn, pts):
    """Linear pose from normalised image coords via the 3x4 DLT."""
    mean = pts.mean(axis=0)
    scale = np.sqrt(3) / np.mean(np.linalg.norm(pts - mean, axis=1))
    q = (pts - mean) * scale
    n = len(pts)
    a = np.zeros((2 * n, 12))
    qh = np.hstack([q, np.ones((n, 1))])
    a[0::2, 0:4] = qh
    a[0::2, 8:12] = -xn[:, [0]] * qh
    a[1::2, 4:8] = qh
    a[1::2, 8:12] = -xn[:, [1]] * qh
    _, sv, vt = np.linalg.svd(a)
    if sv[-2] < 1e-10 * sv[0]:
        raise DegenerateConfigurationError("DLT system has a multi-dimensional null space")
    p = vt[-1].reshape(3, 4)
    # undo the 3D normalisation: p_norm @ [s(X - m); 1] == p @ [X; 1]
    m3 = p[:, :3] * scale
    t = p[:, 3] - m3 @ mean
    if np.linalg.det(m3) < 0:
        m3, t = -m3, -t
    r, s = _nearest_rotation(m3)
    t = t / s.mean()
    # all points must sit in front of the camera
    if np.mean(pts @ r.T[:, 2] + t[2]) < 0:
        raise DegenerateConfigurationError("DLT solution places points behind the camera")
    return r, t


def _reprojection(r, t, pts, uv, K):
    pc = pts @ r.T + t
    proj = np.stack([K.fx * pc[:, 0] / pc[:, 2] + K.cx, K.fy * pc[:, 1] / pc[:, 2] + K.cy], axis=1)
    return pc, (proj - uv).reshape(-1)


def solve_pnp(points2d, points3d, K, max_iter=50, tol=1e-12, max_rms=None):
    """Object-to-camera pose from >= 6 2D-3D correspondences.

    A normalised DLT gives the starting pose, then Gauss-Newton on the
    pixel reprojection error refines rotation (left-multiplied axis-angle
    increment) and translation.  ``max_rms``, when given, raises
    :class:`PnPConvergenceError` if the final RMS exceeds it.
    """
    uv = np.asarray(points2d, dtype=float).reshape(-1, 2)
    pts = np.asarray(points3d, dtype=float).reshape(-1, 3)
    if len(uv) != len(pts):
        raise ConfigurationError("2D and 3D point counts differ")
    if len(pts) < 6:
        raise DegenerateConfigurationError(f"need at least 6 correspondences, got {len(pts)}")
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if sv[2] < 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfigurationError("3D points are collinear or coplanar")
    xn = np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy], axis=1)
    r, t = _dlt(xn, pts)

    pc, res = _reprojection(r, t, pts, uv, K)
    cost = res @ res
    for _ in range(max_iter):
        if np.any(pc[:, 2] <= 0):
            raise PnPConvergenceError("iterate moved points behind the camera", np.sqrt(cost / len(pts)))
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        # d(u,v)/d(pc)
        jp = np.zeros((len(pts), 2, 3))
        jp[:, 0, 0] = K.fx / z
        jp[:, 0, 2] = -K.fx * x / z**2
        jp[:, 1, 1] = K.fy / z
        jp[:, 1, 2] = -K.fy * y / z**2
        # d(pc)/d(w) = -[pc - t]x for R <- exp(w) R, d(pc)/dt = I
        rp = pc - t
        jw = np.zeros((len(pts), 3, 3))
        jw[:, 0, 1], jw[:, 0, 2] = rp[:, 2], -rp[:, 1]
        jw[:, 1, 0], jw[:, 1, 2] = -rp[:, 2], rp[:, 0]
        jw[:, 2, 0], jw[:, 2, 1] = rp[:, 1], -rp[:, 0]
        j = np.concatenate([jp @ jw, jp], axis=2).reshape(-1, 6)
        delta, *_ = np.linalg.lstsq(j, -res, rcond=None)
        r_new = _expmap(delta[:3]) @ r
        r_new, _ = _nearest_rotation(r_new)
        t_new = t + delta[3:]
        pc_new, res_new = _reprojection(r_new, t_new, pts, uv, K)
        cost_new = res_new @ res_new
        if cost_new > cost and np.linalg.norm(delta) > tol:
            break
        r, t, pc, res, cost = r_new, t_new, pc_new, res_new, cost_new
        if np.linalg.norm(delta) < tol:
            break
    rms = float(np.sqrt(cost / len(pts)))
    if not np.isfinite(rms) or (max_rms is not None and rms > max_rms):
        raise PnPConvergenceError("PnP did not converge", rms)
    return RigidTransform(r, t)


def azel_to_rotation(view):
    """Object-to-camera rotation of a roll-free camera looking at the object centre."""
    az, el = np.radians(view.azimuth), np.radians(view.elevation)
    d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    z_c = -d
    x_c = np.array([-np.sin(az), np.cos(az), 0.0])
    y_c = np.cross(z_c, x_c)
    return np.stack([x_c, y_c, z_c])


def rotation_to_azel(r):
    """View angles of the optical axis of an object-to-camera rotation.

    Uses only the viewing direction (third row of ``r``), so any roll about
    the optical axis is ignored.  At elevation +-90 degrees azimuth is 0.
    """
    d = -np.asarray(r, dtype=float)[2]
    d = d / np.linalg.norm(d)
    horiz = np.hypot(d[0], d[1])
    if horiz < 1e-12:
        return ViewAngles(0.0, 90.0 if d[2] > 0 else -90.0)
    # atan2 keeps full precision near the poles where arcsin would not
    el = float(np.degrees(np.arctan2(d[2], horiz)))
    az = float(np.degrees(np.arctan2(d[1], d[0]))) % 360.0
    return ViewAngles(az, el)


def view_camera(view, distance, target=np.zeros(3)):
    """Object-to-camera transform for a camera ``distance`` away from ``target``."""
    r = azel_to_rotation(view)
    return RigidTransform(r, np.array([0.0, 0.0, distance]) - r @ np.asarray(target, dtype=float))
