import json

import numpy as np
import pytest

from handfit import io
from handfit.hand_model import HandParams, default_light
from handfit.losses import Keypoints2D
from handfit.render import CameraModel


def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = io.to_uint8(rng.uniform(0, 1, (7, 9, 3))) / 255.0
    io.write_image(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(io.read_image(tmp_path / "a.ppm"), img)
    gray = io.to_uint8(rng.uniform(0, 1, (5, 4))) / 255.0
    io.write_image(tmp_path / "g.pgm", gray)
    np.testing.assert_array_equal(io.read_image(tmp_path / "g.pgm"), gray)


def test_image_header_comments_and_errors(tmp_path):
    raw = bytes(range(12))
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 2\n255\n" + raw)
    np.testing.assert_array_equal(io.read_image(tmp_path / "c.ppm").ravel() * 255, np.arange(12))
    (tmp_path / "t.ppm").write_bytes(b"P6\n2 2\n255\n" + raw[:5])
    with pytest.raises(io.FormatError, match="truncated"):
        io.read_image(tmp_path / "t.ppm")
    (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(io.FormatError, match="ASCII"):
        io.read_image(tmp_path / "x.ppm")
    (tmp_path / "d.ppm").write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(io.FormatError, match="8-bit"):
        io.read_image(tmp_path / "d.ppm")


def test_keypoint_formats(tmp_path):
    rng = np.random.default_rng(1)
    px = np.column_stack([rng.uniform(0, 64, (21, 2)), rng.uniform(0, 1, 21)])
    kp = io.parse_keypoints(px.tolist(), 64, 32)
    np.testing.assert_allclose(kp.points, px[:, :2] / [64, 32])
    openpose = {"people": [{"hand_right_keypoints_2d": px.ravel().tolist()}]}
    kp2 = io.parse_keypoints(openpose, 64, 32)
    np.testing.assert_array_equal(kp.points, kp2.points)
    back = io.parse_keypoints(io.keypoints_to_json(kp, 64, 32), 64, 32)
    np.testing.assert_allclose(back.points, kp.points, rtol=1e-15)
    with pytest.raises(io.FormatError, match="21"):
        io.parse_keypoints(px[:20].tolist(), 64, 32)
    with pytest.raises(io.FormatError, match="no people"):
        io.parse_keypoints({"people": []}, 64, 32)
    bad = px.copy()
    bad[0, 2] = 1.5
    assert io.parse_keypoints(bad.tolist(), 64, 32).conf[0] == 1.0
    (tmp_path / "k.json").write_text("{not json")
    with pytest.raises(io.FormatError, match="invalid JSON"):
        io.load_keypoints(tmp_path / "k.json", 64, 32)


def _write_sequence(tmp_path, n=3, cam=None):
    cam = cam or CameraModel(width=16, height=16, fx=20, fy=20, cx=8, cy=8)
    rng = np.random.default_rng(2)
    frames = []
    for i in range(n):
        io.write_image(tmp_path / f"{i}.ppm", rng.uniform(0, 1, (16, 16, 3)))
        kp = Keypoints2D(rng.uniform(0, 1, (21, 2)), np.ones(21))
        (tmp_path / f"{i}.json").write_text(json.dumps(io.keypoints_to_json(kp, 16, 16)))
        frames.append({"index": i, "image": f"{i}.ppm", "keypoints": f"{i}.json", "camera": cam.to_dict()})
    io.write_manifest(tmp_path / "manifest.json", {"s0": frames})
    return tmp_path / "manifest.json"


def test_manifest_round_trip(tmp_path):
    path = _write_sequence(tmp_path)
    man = io.load_manifest(path)
    assert [s.id for s in man.sequences] == ["s0"]
    seq = man.sequences[0]
    assert [f.index for f in seq.frames] == [0, 1, 2]
    assert seq.frames[1].load_image().shape == (16, 16, 3)
    assert seq.frames[0].camera.width == 16


def test_manifest_reports_every_problem(tmp_path):
    path = _write_sequence(tmp_path)
    doc = json.loads(path.read_text())
    doc["sequences"][0]["frames"][1]["keypoints"] = "missing.json"
    doc["sequences"][0]["frames"][2]["index"] = 0
    path.write_text(json.dumps(doc))
    with pytest.raises(io.ManifestError) as info:
        io.load_manifest(path)
    problems = info.value.problems
    assert any("frame 1" in p and "missing keypoint" in p for p in problems)
    assert any("strictly increasing" in p for p in problems)
    doc["schema"] = "other"
    path.write_text(json.dumps(doc))
    with pytest.raises(io.ManifestError, match="schema"):
        io.load_manifest(path)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    params = [HandParams(rng.normal(size=30), rng.normal(size=10), 1.1, rng.normal(size=3),
                         rng.normal(size=3), rng.uniform(size=(1538, 3)), default_light()) for _ in range(2)]
    io.save_checkpoint(tmp_path / "p.json", params, [4, 7], extra={"mode": "video"})
    back, doc = io.load_checkpoint(tmp_path / "p.json")
    assert doc["frame_indices"] == [4, 7] and doc["mode"] == "video"
    for a, b in zip(params, back):
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.texture, b.texture)
        assert a.scale == b.scale
    doc["schema"] = "nope"
    (tmp_path / "q.json").write_text(json.dumps(doc))
    with pytest.raises(io.FormatError):
        io.load_checkpoint(tmp_path / "q.json")
