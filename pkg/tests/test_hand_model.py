import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from handfit import hand_model as hm
from handfit.gradcheck import numeric_gradient, relative_errors

MODEL = hm.default_model()


def _homog(s, rot, trans):
    m = np.eye(4)
    m[:3, :3] = s * Rotation.from_rotvec(rot).as_matrix()
    m[:3, 3] = trans
    return m


def test_default_counts():
    assert MODEL.n_verts == 778
    assert MODEL.n_faces == 1538
    assert MODEL.regressor.shape == (21, 778)
    assert MODEL.blendshapes.shape == (10, 778, 3)


def test_template_is_closed_except_wrist():
    # every interior edge is shared by exactly two faces; a single wrist loop is open
    edges = {}
    for f in MODEL.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (min(a, b), max(a, b))
            edges[key] = edges.get(key, 0) + 1
    counts = np.array(list(edges.values()))
    assert counts.max() == 2
    assert np.all(MODEL.faces < MODEL.n_verts)
    boundary = [k for k, c in edges.items() if c == 1]
    assert len(boundary) == len({v for e in boundary for v in e})  # one simple loop


def test_skinning_weights_are_convex():
    w = MODEL.skin_weight
    assert w.shape == (778, 4)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w >= 0)


def test_zero_code_gives_template():
    dec = MODEL.decode(np.zeros(30), np.zeros(10))
    np.testing.assert_array_equal(dec.vertices, MODEL.template)
    np.testing.assert_allclose(dec.joints, MODEL.regressor @ MODEL.template, atol=1e-15)


def test_blendshape_linearity():
    beta = np.random.default_rng(0).normal(size=10)
    d1 = MODEL.decode(np.zeros(30), beta).vertices - MODEL.template
    d2 = MODEL.decode(np.zeros(30), 2 * beta).vertices - MODEL.template
    np.testing.assert_allclose(d2, 2 * d1, atol=1e-12)


def test_counts_for_any_code():
    rng = np.random.default_rng(1)
    dec = MODEL.decode(rng.normal(0, 0.5, 30), rng.normal(size=10))
    assert dec.joints.shape == (21, 3)
    assert dec.vertices.shape == (778, 3)


def test_support_only_joints_match_full_decode():
    rng = np.random.default_rng(2)
    theta, beta = rng.normal(0, 0.5, 30), rng.normal(size=10)
    full = MODEL.decode(theta, beta, jacobian=True)
    part = MODEL.decode(theta, beta, jacobian=True, vertices=False)
    np.testing.assert_allclose(part.joints, full.joints, atol=1e-14)
    np.testing.assert_allclose(part.d_joints, full.d_joints, atol=1e-13)


@pytest.mark.parametrize("theta,beta", [(np.zeros(29), np.zeros(10)), (np.zeros(30), np.zeros(11))])
def test_decode_rejects_lengths(theta, beta):
    with pytest.raises(ValueError):
        MODEL.decode(theta, beta)


def test_decode_is_deterministic():
    rng = np.random.default_rng(3)
    theta, beta = rng.normal(0, 0.5, 30), rng.normal(size=10)
    a = MODEL.decode(theta, beta)
    b = MODEL.decode(theta.copy(), beta.copy())
    assert a.vertices.tobytes() == b.vertices.tobytes()


def test_global_transform_examples():
    mesh = MODEL.mesh(MODEL.template)
    j = MODEL.regressor @ MODEL.template
    m2, j2 = hm.apply_global_transform(mesh, j, 1.0, np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(m2.vertices, mesh.vertices)
    np.testing.assert_array_equal(j2, j)
    m3, j3 = hm.apply_global_transform(mesh, j, 1.0, np.zeros(3), [0, 0, 0.5])
    np.testing.assert_allclose(m3.vertices - mesh.vertices, np.tile([0, 0, 0.5], (778, 1)), atol=1e-15)
    np.testing.assert_allclose(j3[:, 2] - j[:, 2], 0.5, atol=1e-15)


@pytest.mark.parametrize("s", [0.0, -1.0])
def test_global_transform_rejects_scale(s):
    with pytest.raises(ValueError):
        hm.apply_global_transform(None, np.zeros((21, 3)), s, np.zeros(3), np.zeros(3))


def test_global_transform_rotates_normals_only():
    mesh = MODEL.mesh(MODEL.template)
    rot = np.array([0.3, -0.2, 0.9])
    m2, _ = hm.apply_global_transform(mesh, np.zeros((21, 3)), 2.0, rot, [1, 2, 3])
    np.testing.assert_allclose(m2.normals, mesh.normals @ Rotation.from_rotvec(rot).as_matrix().T, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(m2.normals, axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_global_transform_composes_like_matrices(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(21, 3))
    s1, s2 = rng.uniform(0.5, 2, 2)
    r1, r2 = rng.normal(size=(2, 3))
    t1, t2 = rng.normal(size=(2, 3))
    _, once = hm.apply_global_transform(None, pts, s1, r1, t1)
    _, twice = hm.apply_global_transform(None, once, s2, r2, t2)
    m = _homog(s2, r2, t2) @ _homog(s1, r1, t1)
    want = pts @ m[:3, :3].T + m[:3, 3]
    np.testing.assert_allclose(twice, want, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bone_lengths_scale_with_s(seed):
    rng = np.random.default_rng(seed)
    dec = MODEL.decode(rng.normal(0, 0.4, 30), rng.normal(size=10), vertices=False)
    s = rng.uniform(0.5, 2)
    _, j = hm.apply_global_transform(None, dec.joints, s, rng.normal(size=3), rng.normal(size=3))
    a, b = hm.BONE_PAIRS[:, 0], hm.BONE_PAIRS[:, 1]
    l0 = np.linalg.norm(dec.joints[b] - dec.joints[a], axis=1)
    l1 = np.linalg.norm(j[b] - j[a], axis=1)
    np.testing.assert_allclose(l1, s * l0, atol=1e-9)


def test_joint_angles_examples():
    np.testing.assert_array_equal(MODEL.joint_angles(np.zeros(30)), np.zeros((10, 3)))
    # pure roll about the bone-frame x axis of joint 4
    theta = np.zeros(30)
    b = MODEL.bone_frames[4]
    theta[12:15] = b @ np.array([np.pi / 6, 0, 0])
    ang = MODEL.joint_angles(theta)
    np.testing.assert_allclose(ang[4], [0, 0, np.pi / 6], atol=1e-12)
    np.testing.assert_allclose(np.delete(ang, 4, axis=0), 0.0)


def test_joint_angles_recompose_against_scipy_euler():
    rng = np.random.default_rng(4)
    for _ in range(50):
        theta = rng.normal(0, 0.8, 30)
        ang = MODEL.joint_angles(theta)
        assert np.all(ang > -np.pi) and np.all(ang <= np.pi)
        for a in range(10):
            b = MODEL.bone_frames[a]
            local = b.T @ Rotation.from_rotvec(theta[3 * a:3 * a + 3]).as_matrix() @ b
            want = Rotation.from_euler("ZYX", ang[a]).as_matrix()
            np.testing.assert_allclose(want, local, atol=1e-7)


def test_canonical_normal_examples():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
    n, flag = hm.face_normals(v, np.array([[0, 1, 2]]))
    np.testing.assert_array_equal(n, [[0, 0, 1]])
    assert not flag[0]
    n, _ = hm.face_normals(v, np.array([[0, 2, 1]]))
    np.testing.assert_array_equal(n, [[0, 0, -1]])
    np.testing.assert_allclose(np.linalg.norm(MODEL.canonical_normals, axis=1), 1.0, atol=1e-9)


def test_degenerate_face_is_flagged():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
    n, flag = hm.face_normals(v, np.array([[0, 1, 2]]))
    assert flag[0]
    np.testing.assert_array_equal(n[0], [0, 0, 1])


def test_template_normals_point_outward():
    centroid = MODEL.template.mean(axis=0)
    cent = MODEL.template[MODEL.faces].mean(axis=1)
    # most faces of a roughly convex palm face away from the centroid
    outward = np.sum(MODEL.canonical_normals * (cent - centroid), axis=1) > 0
    assert outward.mean() > 0.8


def _fd_check(fn, jac, x, step=1e-5):
    rng = np.random.default_rng(5)
    w = rng.normal(size=fn(x).shape)
    num = numeric_gradient(lambda y: float(np.sum(w * fn(y))), x, step)
    ana = np.tensordot(w, jac, axes=w.ndim)
    return relative_errors(ana, num).max()


def test_decode_jacobians_match_differences():
    rng = np.random.default_rng(6)
    for _ in range(3):
        x = np.concatenate([rng.normal(0, 0.4, 30), rng.normal(size=10)])
        dec = MODEL.decode(x[:30], x[30:], jacobian=True)
        assert _fd_check(lambda y: MODEL.decode(y[:30], y[30:]).joints, dec.d_joints, x) < 1e-4
        assert _fd_check(lambda y: MODEL.decode(y[:30], y[30:]).vertices, dec.d_vertices, x) < 1e-4


def test_camera_points_jacobian_matches_differences():
    rng = np.random.default_rng(7)
    g = np.concatenate([rng.normal(0, 0.4, 30), rng.normal(size=10), [1.1], rng.normal(size=3), [0, 0, 0.5]])
    dec = MODEL.decode(g[:30], g[30:40], jacobian=True, vertices=False)
    _, jac = hm.camera_points(dec.joints, g, dec.d_joints)

    def fn(y):
        d = MODEL.decode(y[:30], y[30:40], vertices=False)
        return hm.camera_points(d.joints, y)[0]

    assert _fd_check(fn, jac, g) < 1e-4


def test_joint_angle_jacobian_matches_differences():
    rng = np.random.default_rng(8)
    theta = rng.normal(0, 0.5, 30)
    _, jac = MODEL.joint_angles(theta, jacobian=True)
    assert _fd_check(MODEL.joint_angles, jac, theta) < 1e-4


def test_model_file_round_trip(tmp_path):
    path = tmp_path / "model.json"
    MODEL.save(path)
    assert json.loads(path.read_text())["schema"] == hm.MODEL_SCHEMA
    loaded = hm.HandModel.load(path)
    rng = np.random.default_rng(9)
    theta, beta = rng.normal(0, 0.5, 30), rng.normal(size=10)
    np.testing.assert_array_equal(loaded.decode(theta, beta).vertices, MODEL.decode(theta, beta).vertices)
    np.testing.assert_array_equal(loaded.limits.lower, MODEL.limits.lower)


def test_model_file_rejects_schema(tmp_path):
    d = MODEL.to_dict()
    d["schema"] = "other/9"
    with pytest.raises(ValueError):
        hm.HandModel.from_dict(d)


def test_default_limits():
    lim = MODEL.limits
    np.testing.assert_array_equal(lim.lower[:, 2], -0.17)
    np.testing.assert_array_equal(lim.upper[:, 2], 1.92)
    np.testing.assert_array_equal(lim.upper[:, :2], 0.35)
    np.testing.assert_array_equal(lim.lower[:, :2], -0.35)
    assert hm.JointAngleLimits.from_dict(lim.to_dict()).lower.tobytes() == lim.lower.tobytes()


def test_limits_reject_inverted_range():
    with pytest.raises(ValueError):
        hm.JointAngleLimits(np.ones((10, 3)), np.zeros((10, 3)))


def test_params_validation_and_round_trip():
    p = hm.HandParams(np.zeros(30), np.zeros(10), 1.0, np.zeros(3), [0, 0, 0.5],
                      np.full((1538, 3), 0.5), hm.default_light())
    q = hm.HandParams.from_dict(json.loads(json.dumps(p.to_dict())))
    np.testing.assert_array_equal(q.geometry, p.geometry)
    assert p.geometry.size == hm.GEOM_DIM
    with pytest.raises(ValueError):
        hm.HandParams(np.zeros(30), np.zeros(10), 0.0, np.zeros(3), np.zeros(3), np.zeros((4, 3)), hm.default_light())
    with pytest.raises(ValueError):
        hm.HandParams(np.zeros(30), np.zeros(10), 1.0, np.zeros(3), np.zeros(3),
                      np.full((4, 3), np.nan), hm.default_light())
