import json

import numpy as np
import pytest

from midpose.datasets import load_annotations
from midpose.errors import ConfigurationError, FormatError, MissingFileError
from midpose.geometry import Bbox3D, CameraIntrinsics, RigidTransform, ViewAngles, bbox_corners, invert_transform, rot_x
from midpose.labeler import (BoxAnnotation, Frame, camera_for_view, export_labels, floor_depth, fuse_pointcloud,
                             label_poses, load_scene, summarize, summary_path, synthetic_scene)

K = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


def az_diff(a, b):
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    frames, boxes, truth = synthetic_scene(root, n_frames=10, seed=4, with_skips=True)
    return root, frames, boxes, truth


def test_round_trip_recovers_views(scene):
    _, frames, boxes, truth = scene
    labels = label_poses(boxes[0], frames)
    for lab in labels:
        expected = truth[lab.frame_id]
        if isinstance(expected, str):
            assert lab.skip_reason == expected
            continue
        assert lab.labeled, lab.frame_id
        assert lab.n_visible == 8
        assert az_diff(lab.view.azimuth, expected.azimuth) < 1e-3
        assert abs(lab.view.elevation - expected.elevation) < 1e-3


def test_skip_reasons_partition(scene):
    _, frames, boxes, _ = scene
    counts = summarize(label_poses(boxes[0], frames))
    assert counts["total"] == len(frames) == 12
    assert counts["labeled"] + counts["truncated"] + counts["behind_camera"] + counts["degenerate"] == counts["total"]
    assert counts["truncated"] == 1 and counts["behind_camera"] == 1


def test_five_visible_corners_is_truncated():
    ann = BoxAnnotation("o", "chair", Bbox3D([0, 0, 0.5], [1.0, 0.6, 1.0], np.eye(3)))
    pose = camera_for_view(ann.box, ViewAngles(33.0, 21.0), 4.0)
    pc = invert_transform(pose).apply(bbox_corners(ann.box))
    u = np.sort(K.fx * pc[:, 0] / pc[:, 2] + K.cx)
    # shift the principal point so the three leftmost corners fall off the image
    delta = -0.5 - (u[2] + u[3]) / 2
    K5 = CameraIntrinsics(K.fx, K.fy, K.cx + delta, K.cy, K.width, K.height)
    (lab,) = label_poses(ann, [Frame("f", pose, K5, depth=np.zeros((480, 640)))])
    assert lab.n_visible == 5 and lab.skip_reason == "truncated"
    # six corners in view is enough
    delta6 = -0.5 - (u[1] + u[2]) / 2
    K6 = CameraIntrinsics(K.fx, K.fy, K.cx + delta6, K.cy, K.width, K.height)
    (lab,) = label_poses(ann, [Frame("f", pose, K6, depth=np.zeros((480, 640)))])
    assert lab.n_visible == 6 and lab.labeled
    assert abs(lab.view.elevation - 21.0) < 1e-6


def test_threshold_below_six_rejected(scene):
    _, frames, boxes, _ = scene
    with pytest.raises(ConfigurationError):
        label_poses(boxes[0], frames, min_visible_corners=5)


def test_camera_facing_away(scene):
    _, frames, boxes, _ = scene
    f0 = frames[0]
    away = RigidTransform(f0.camera_to_world.rotation @ rot_x(180.0), f0.camera_to_world.translation)
    (lab,) = label_poses(boxes[0], [Frame("away", away, K, depth=np.zeros((480, 640)))])
    assert lab.skip_reason == "behind_camera" and lab.view is None


def test_constant_depth_identity_pose():
    pts = fuse_pointcloud([Frame("f", RigidTransform.identity(), K, depth=np.full((480, 640), 2.0))])
    assert pts.shape == (480 * 640, 3)
    np.testing.assert_allclose(pts[:, 2], 2.0)


def test_stride_four_count():
    depth = np.full((480, 640), 2.0)
    depth[:100] = 0.0  # invalid
    valid = int((depth > 0).sum())
    pts = fuse_pointcloud([Frame("f", RigidTransform.identity(), K, depth=depth)], stride=4)
    assert abs(len(pts) - valid / 16) <= (640 + 480) / 4


def test_fused_plane_is_coplanar():
    # two views of the world plane z = 0, at different heights and tilts
    views = [(ViewAngles(20.0, 35.0), 3.0), (ViewAngles(200.0, 55.0), 4.5)]
    frames = []
    target = Bbox3D([0.3, -0.2, 0.0], [1.0, 1.0, 1.0], np.eye(3))
    for i, (view, dist) in enumerate(views):
        pose = camera_for_view(target, view, dist)
        frames.append(Frame(f"f{i}", pose, K, depth=floor_depth(pose, K)))
    pts = fuse_pointcloud(frames, stride=2)
    assert len(pts) > 1000
    centred = pts - pts.mean(axis=0)
    normal = np.linalg.svd(centred, full_matrices=False)[2][-1]
    assert np.abs(centred @ normal).max() < 1e-6
    assert np.abs(pts[:, 2]).max() < 1e-6


def test_depth_files_fuse(scene):
    _, frames, _, _ = scene
    pts = fuse_pointcloud(frames[:2], stride=8)
    # millimetre depth quantisation keeps the floor within a millimetre
    assert np.abs(pts[:, 2]).max() < 1e-3 * 1.5


def test_missing_depth_names_frame(tmp_path):
    f = Frame("frame_x", RigidTransform.identity(), K, depth_path=tmp_path / "absent.pgm")
    with pytest.raises(MissingFileError, match="frame_x"):
        fuse_pointcloud([f])
    with pytest.raises(ConfigurationError):
        fuse_pointcloud([])


def test_export(scene, tmp_path):
    _, frames, boxes, _ = scene
    labels = label_poses(boxes[0], frames)
    out = tmp_path / "labels.jsonl"
    counts = export_labels(labels, out)
    lines = out.read_text().splitlines()
    assert len(lines) == counts["labeled"] == 10
    anns = load_annotations(out)
    assert [a.sample_id for a in anns] == sorted(a.sample_id for a in anns)
    assert all(0 <= a.azimuth_deg < 360 for a in anns)
    assert json.loads(summary_path(out).read_text()) == counts
    first = out.read_bytes(), summary_path(out).read_bytes()
    export_labels(list(reversed(labels)), out)
    assert (out.read_bytes(), summary_path(out).read_bytes()) == first
    with pytest.raises(ConfigurationError):
        export_labels([], tmp_path / "empty.jsonl")


def test_export_three_frames(scene, tmp_path):
    _, frames, boxes, _ = scene
    labels = label_poses(boxes[0], frames[:3])
    export_labels(labels, tmp_path / "three.jsonl")
    assert len(load_annotations(tmp_path / "three.jsonl")) == 3


def test_scene_manifest_round_trip(scene):
    root, frames, boxes, _ = scene
    loaded_frames, loaded_boxes = load_scene(root / "scene.json")
    assert [f.frame_id for f in loaded_frames] == [f.frame_id for f in frames]
    np.testing.assert_allclose(loaded_frames[3].camera_to_world.matrix(), frames[3].camera_to_world.matrix())
    a = label_poses(loaded_boxes[0], loaded_frames)
    b = label_poses(boxes[0], frames)
    assert [(x.skip_reason, x.view) for x in a] == [(x.skip_reason, x.view) for x in b]


def test_scene_manifest_rejects_unknown_keys(scene, tmp_path):
    root, _, _, _ = scene
    doc = json.loads((root / "scene.json").read_text())
    doc["frames"][0]["exposure"] = 1
    p = root / "bad_scene.json"
    p.write_text(json.dumps(doc))
    try:
        with pytest.raises(FormatError, match="exposure"):
            load_scene(p)
    finally:
        p.unlink()
    with pytest.raises(MissingFileError):
        load_scene(tmp_path / "nope.json")
