"""Pose labels for RGB-D scenes from annotated 3D boxes.

Depth frames with known camera poses are fused into a world point cloud,
in which 3D boxes are annotated (outside this module).  For each frame the
box corners are projected into the image and the object pose is recovered
with PnP against the corners in the object frame, which yields the
azimuth/elevation labels.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .datasets import Annotation, write_annotations
from .errors import (ConfigurationError, DegenerateConfigurationError, FormatError, MissingFileError,
                     PnPConvergenceError)
from .geometry import (CORNER_SIGNS, Bbox3D, CameraIntrinsics, RigidTransform, ViewAngles, azel_to_rotation,
                       backproject_depth, bbox_corners, invert_transform, rot_y, rotation_to_azel, solve_pnp)

log = logging.getLogger(__name__)

MIN_VISIBLE_CORNERS = 6
SKIP_REASONS = ("truncated", "behind_camera", "degenerate")


@dataclass
class Frame:
    """One depth image; ``camera_to_world`` maps camera coordinates to the world."""

    frame_id: str
    camera_to_world: RigidTransform
    intrinsics: CameraIntrinsics
    depth_path: Path | None = None
    depth: np.ndarray | None = None

    def __post_init__(self):
        self.camera_to_world.validate()

    def load_depth(self):
        if self.depth is not None:
            return np.asarray(self.depth, dtype=float)
        if self.depth_path is None or not Path(self.depth_path).is_file():
            raise MissingFileError(f"frame {self.frame_id}: depth file not found: {self.depth_path}")
        return formats.load_depth_m(self.depth_path)


@dataclass
class BoxAnnotation:
    object_id: str
    category: str
    box: Bbox3D
    mesh_id: str | None = None


@dataclass
class FrameLabel:
    """Outcome for one (box, frame) pair; ``skip_reason`` is None when labelled."""

    frame_id: str
    object_id: str
    category: str
    mesh_id: str
    n_visible: int
    skip_reason: str | None = None
    pose: RigidTransform | None = None
    view: ViewAngles | None = None
    corners_px: np.ndarray | None = None

    @property
    def labeled(self):
        return self.skip_reason is None


def fuse_pointcloud(frames, stride=1):
    """World-frame points of every valid depth pixel, sampled every ``stride`` pixels."""
    frames = list(frames)
    if not frames:
        raise ConfigurationError("need at least one frame")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    clouds = [backproject_depth(f.load_depth(), f.intrinsics, f.camera_to_world, stride) for f in frames]
    return np.concatenate(clouds, axis=0)


def object_corners(box):
    """Box corners in the object frame, same order as :func:`bbox_corners`."""
    return CORNER_SIGNS * (box.dims / 2.0)


def _label_frame(ann, frame, min_visible):
    K = frame.intrinsics
    world_to_cam = invert_transform(frame.camera_to_world)
    pc = world_to_cam.apply(bbox_corners(ann.box))
    label = FrameLabel(frame.frame_id, ann.object_id, ann.category, ann.mesh_id or ann.object_id, 0)
    front = pc[:, 2] > 0
    if front.sum() < min_visible:
        label.skip_reason = "behind_camera"
        return label
    z = np.where(front, pc[:, 2], 1.0)
    uv = np.stack([K.fx * pc[:, 0] / z + K.cx, K.fy * pc[:, 1] / z + K.cy], axis=1)
    # the image covers [-0.5, W - 0.5) x [-0.5, H - 0.5) with pixel centres on integers
    inside = front & (uv[:, 0] >= -0.5) & (uv[:, 0] < K.width - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] < K.height - 0.5)
    label.n_visible = int(inside.sum())
    if label.n_visible < min_visible:
        label.skip_reason = "truncated"
        return label
    try:
        pose = solve_pnp(uv[inside], object_corners(ann.box)[inside], K)
    except (DegenerateConfigurationError, PnPConvergenceError) as exc:
        log.info("frame %s, object %s: %s", frame.frame_id, ann.object_id, exc)
        label.skip_reason = "degenerate"
        return label
    label.pose = pose
    label.view = rotation_to_azel(pose.rotation)
    label.corners_px = uv
    return label


def label_poses(box, frames, min_visible_corners=MIN_VISIBLE_CORNERS):
    """One :class:`FrameLabel` per frame, in the order given."""
    if min_visible_corners < 6:
        raise ConfigurationError("PnP needs at least 6 visible corners")
    return [_label_frame(box, f, min_visible_corners) for f in frames]


def summarize(labels):
    counts = {"total": len(labels), "labeled": sum(l.labeled for l in labels)}
    for r in SKIP_REASONS:
        counts[r] = sum(l.skip_reason == r for l in labels)
    return counts


def _sorted(labels):
    return sorted(labels, key=lambda l: (l.frame_id, l.object_id))


def to_annotations(labels):
    out = []
    for l in _sorted(labels):
        if not l.labeled:
            continue
        az = l.view.azimuth if l.view.azimuth < 360.0 else 0.0
        extra = {"frame_id": l.frame_id, "object_id": l.object_id,
                 "rotation": l.pose.rotation.tolist(), "translation": l.pose.translation.tolist(),
                 "corners_px": l.corners_px.tolist()}
        out.append(Annotation(f"{l.frame_id}/{l.object_id}", l.category, l.mesh_id, az, l.view.elevation,
                              extra=extra))
    return out


def summary_path(out_path):
    out_path = Path(out_path)
    return out_path.with_name(out_path.stem + ".summary.json")


def export_labels(labels, out_path):
    """Write labelled frames as JSON lines (ordered by frame id) plus a summary file.

    Skipped frames are left out of the annotations and counted in
    ``<stem>.summary.json`` next to ``out_path``.  Returns the summary dict.
    """
    labels = list(labels)
    if not labels:
        raise ConfigurationError("no labelling results to export")
    out_path = Path(out_path)
    write_annotations(out_path, to_annotations(labels))
    counts = summarize(labels)
    formats.atomic_write_bytes(summary_path(out_path), (json.dumps(counts, sort_keys=True, indent=2) + "\n").encode())
    return counts


# ---------------------------------------------------------------------------
# scene manifests

_FRAME_KEYS = {"frame_id", "depth", "camera_to_world", "intrinsics"}
_BOX_KEYS = {"object_id", "category", "center", "dims", "rotation", "mesh_id"}
_INTRINSIC_KEYS = {"fx", "fy", "cx", "cy", "width", "height"}


def _check_keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise FormatError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise FormatError(f"{where}: missing keys {sorted(missing)}")


def load_scene(path):
    """Frames and box annotations from a JSON scene manifest.

    ``camera_to_world`` is a row-major 4x4 matrix; ``depth`` is a path relative
    to the manifest.  Depth files are only read when needed.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such scene manifest: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc.msg}") from None
    _check_keys(doc, {"frames", "boxes"}, {"frames", "boxes"}, str(path))
    frames, boxes = [], []
    try:
        for i, f in enumerate(doc["frames"]):
            where = f"{path}: frames[{i}]"
            _check_keys(f, _FRAME_KEYS, _FRAME_KEYS, where)
            _check_keys(f["intrinsics"], _INTRINSIC_KEYS, _INTRINSIC_KEYS, where + ".intrinsics")
            m = np.asarray(f["camera_to_world"], dtype=float)
            if m.shape != (4, 4):
                raise FormatError(f"{where}: camera_to_world must be 4x4")
            frames.append(Frame(str(f["frame_id"]), RigidTransform.from_matrix(m),
                                CameraIntrinsics(**f["intrinsics"]), depth_path=path.parent / f["depth"]))
        for i, b in enumerate(doc["boxes"]):
            _check_keys(b, _BOX_KEYS, _BOX_KEYS - {"mesh_id"}, f"{path}: boxes[{i}]")
            boxes.append(BoxAnnotation(str(b["object_id"]), str(b["category"]),
                                       Bbox3D(b["center"], b["dims"], b["rotation"]), b.get("mesh_id")))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    ids = [f.frame_id for f in frames]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate frame ids")
    return frames, boxes


def write_scene(path, frames, boxes):
    """Inverse of :func:`load_scene`; depth paths are stored relative to the manifest."""
    path = Path(path)
    base = path.parent.resolve()
    doc = {
        "frames": [{"frame_id": f.frame_id,
                    "depth": Path(f.depth_path).resolve().relative_to(base).as_posix(),
                    "camera_to_world": f.camera_to_world.matrix().tolist(),
                    "intrinsics": f.intrinsics.to_dict()} for f in frames],
        "boxes": [{"object_id": b.object_id, "category": b.category, "center": b.box.center.tolist(),
                   "dims": b.box.dims.tolist(), "rotation": b.box.rotation.tolist(),
                   **({"mesh_id": b.mesh_id} if b.mesh_id else {})} for b in boxes],
    }
    formats.atomic_write_bytes(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())


def camera_for_view(box, view, distance):
    """Camera-to-world pose that sees ``box`` from ``view`` at ``distance`` from its centre."""
    r_oc = azel_to_rotation(view)
    obj_to_cam = RigidTransform(r_oc, np.array([0.0, 0.0, distance]))
    cam_to_obj = invert_transform(obj_to_cam)
    return box.pose().compose(cam_to_obj)


def floor_depth(camera_to_world, K, floor_z=0.0):
    """Depth image of the plane ``z = floor_z`` (zero where the ray misses it)."""
    vs, us = np.mgrid[0:K.height, 0:K.width].astype(float)
    rays = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones_like(us)], axis=-1)
    dirs = rays @ camera_to_world.rotation.T
    origin = camera_to_world.translation
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = (floor_z - origin[2]) / dirs[..., 2]
    return np.where(np.isfinite(depth) & (depth > 0), depth, 0.0)


def synthetic_scene(out_dir, n_frames=12, seed=0, intrinsics=None, with_skips=False):
    """A box on a floor seen from ``n_frames`` cameras; writes depth PGMs and ``scene.json``.

    Returns ``(frames, boxes, truth)`` where ``truth`` maps frame id to the
    :class:`ViewAngles` used to place that camera.  The cameras ring the box
    at elevations in [5, 40] degrees.  ``with_skips`` adds a truncated and a
    behind-camera frame whose ``truth`` entry is the expected skip reason.
    """
    out_dir = Path(out_dir)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    K = intrinsics or CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)
    yaw = float(rng.uniform(0, 360))
    c, s = np.cos(np.radians(yaw)), np.sin(np.radians(yaw))
    dims = np.array([1.2, 0.8, 0.9])
    box = BoxAnnotation("obj0", "table", Bbox3D([rng.uniform(-1, 1), rng.uniform(-1, 1), dims[2] / 2],
                                                 dims, [[c, -s, 0], [s, c, 0], [0, 0, 1]]), "table_000")
    frames, truth = [], {}
    for i in range(n_frames):
        view = ViewAngles(float(rng.uniform(0, 360)), float(rng.uniform(5, 40)))
        pose = camera_for_view(box.box, view, float(rng.uniform(3.0, 5.0)))
        fid = f"frame{i:04d}"
        dpath = out_dir / "depth" / f"{fid}.pgm"
        depth = floor_depth(pose, K)
        formats.save_depth_mm(dpath, np.where(depth < 65.0, depth, 0.0))
        frames.append(Frame(fid, pose, K, depth_path=dpath))
        truth[fid] = view
    if with_skips:
        # same viewpoint as the first camera, turned so the box leaves the image
        base = frames[0].camera_to_world
        half_fov = np.degrees(np.arctan(0.5 * K.width / K.fx))
        for fid, turn, reason in (("skip_truncated", half_fov, "truncated"), ("skip_behind", 180.0, "behind_camera")):
            pose = RigidTransform(base.rotation @ rot_y(turn), base.translation)
            dpath = out_dir / "depth" / f"{fid}.pgm"
            depth = floor_depth(pose, K)
            formats.save_depth_mm(dpath, np.where(depth < 65.0, depth, 0.0))
            frames.append(Frame(fid, pose, K, depth_path=dpath))
            truth[fid] = reason
    write_scene(out_dir / "scene.json", frames, [box])
    return frames, [box], truth
