"""Body model: template construction, skinning identities, interchange."""

import numpy as np
import pytest

from vanreid import body


@pytest.fixture(scope="module")
def template():
    return body.build_template(seed=7, resolution=1)


def test_template_size_and_invariants(template):
    k = template.num_vertices
    assert 400 <= k <= 4000
    assert template.faces.min() >= 0 and template.faces.max() < k
    assert (template.uv >= 0).all() and (template.uv <= 1).all()
    sums = template.skin_weights.sum(axis=1)
    assert np.abs(sums - 1.0).max() < 1e-9
    assert ((template.skin_weights > 0).sum(axis=1) <= 4).all()
    assert (template.skin_weights >= 0).all()
    assert (template.rest_joints[0] == 0).all()
    # Single rooted tree: exactly one -1, every parent precedes its child.
    parents = template.joint_tree
    assert parents[0] == -1 and (parents[1:] >= 0).all() and (parents[1:] < np.arange(1, 24)).all()


def test_template_mirror_symmetry(template):
    v = template.vertices
    mirrored = v * np.array([-1.0, 1.0, 1.0])
    # Every vertex must have a counterpart at (-x, y, z).
    from scipy.spatial import cKDTree

    tree = cKDTree(v)
    dist, _ = tree.query(mirrored, k=1)
    assert dist.max() < 1e-9


def test_template_determinism():
    a = body.build_template(seed=7, resolution=1)
    b = body.build_template(seed=7, resolution=1)
    assert (a.vertices == b.vertices).all()
    assert (a.skin_weights == b.skin_weights).all()
    assert (a.shape_basis == b.shape_basis).all()


def test_resolution_scales_vertex_count():
    k1 = body.build_template(resolution=1).num_vertices
    k2 = body.build_template(resolution=2).num_vertices
    assert k2 > 1.5 * k1


def test_rest_pose_is_bit_exact(template):
    mesh = body.skin(template, np.zeros(10), np.zeros((24, 3)))
    assert (mesh.vertices == template.vertices).all()


def test_global_rotation_equivariance(template):
    rng = np.random.default_rng(11)
    for _ in range(3):
        axis_angle = rng.normal(size=3)
        axis_angle *= rng.uniform(0.2, np.pi - 0.1) / np.linalg.norm(axis_angle)
        pose = np.zeros((24, 3))
        pose[0] = axis_angle
        mesh = body.skin(template, np.zeros(10), pose)
        rot = body.rodrigues(axis_angle[None, :])[0]
        want = template.vertices @ rot.T
        assert np.abs(mesh.vertices - want).max() < 1e-9
    # The named case: half turn about the vertical axis.
    pose = np.zeros((24, 3))
    pose[0] = (0.0, np.pi, 0.0)
    mesh = body.skin(template, np.zeros(10), pose)
    want = template.vertices * np.array([-1.0, 1.0, -1.0])
    assert np.abs(mesh.vertices - want).max() < 1e-9


def test_shape_linearity_at_rest(template):
    rest = np.zeros((24, 3))
    base = body.skin(template, np.zeros(10), rest).vertices
    rng = np.random.default_rng(12)
    for _ in range(4):
        b1 = np.zeros(10)
        b2 = np.zeros(10)
        b1[rng.integers(10)] = rng.uniform(-3, 3)
        b2[rng.integers(10)] = rng.uniform(-3, 3)
        d1 = body.skin(template, b1, rest).vertices - base
        d2 = body.skin(template, b2, rest).vertices - base
        both = body.skin(template, np.clip(b1 + b2, -3, 3), rest).vertices - base
        if np.abs(b1 + b2).max() <= 3.0:
            assert np.abs(both - (d1 + d2)).max() < 1e-9


def test_skinned_mesh_bounded(template):
    rng = np.random.default_rng(13)
    for _ in range(5):
        beta = rng.uniform(-3, 3, size=10)
        pose = body.wrap_pose(rng.normal(scale=2.0, size=(24, 3)))
        mesh = body.skin(template, beta, pose)
        assert np.isfinite(mesh.vertices).all()
        assert np.linalg.norm(mesh.vertices, axis=1).max() < 3.0


def test_canonicalize_pose_is_constant():
    rng = np.random.default_rng(14)
    a = body.canonicalize_pose(rng.normal(size=(24, 3)))
    b = body.canonicalize_pose(rng.normal(size=(24, 3)))
    assert (a == b).all()
    assert (body.canonicalize_pose(a) == a).all()
    assert (a[0] == 0).all()  # global orientation zeroed
    assert (a == body.CANONICAL_POSE).all()


def test_wrap_pose_norms():
    rng = np.random.default_rng(15)
    pose = rng.normal(scale=4.0, size=(24, 3))
    wrapped = body.wrap_pose(pose)
    norms = np.linalg.norm(wrapped, axis=1)
    assert (norms <= np.pi + 1e-12).all()
    # Wrapping preserves the rotation itself.
    assert np.abs(body.rodrigues(wrapped) - body.rodrigues(pose)).max() < 1e-9


def test_skin_validates_inputs(template):
    with pytest.raises(ValueError, match="10"):
        body.skin(template, np.zeros(9), np.zeros((24, 3)))
    with pytest.raises(ValueError, match=r"\[-3, 3\]"):
        body.skin(template, np.full(10, 3.5), np.zeros((24, 3)))
    with pytest.raises(ValueError, match="24"):
        body.skin(template, np.zeros(10), np.zeros((23, 3)))
    with pytest.raises(ValueError, match="finite"):
        body.skin(template, np.zeros(10), np.full((24, 3), np.nan))


def test_vanmesh_roundtrip(tmp_path, template):
    path = tmp_path / "body.vanmesh"
    body.save_template(path, template)
    first = path.read_text()
    assert first.startswith("VANMESH 1\n")
    back = body.load_template(path)
    assert (back.vertices == template.vertices).all()
    assert (back.faces == template.faces).all()
    assert (back.uv == template.uv).all()
    assert (back.skin_weights == template.skin_weights).all()
    assert (back.rest_joints == template.rest_joints).all()
    assert (back.shape_basis == template.shape_basis).all()
    assert (back.joint_basis == template.joint_basis).all()
    # Save of the loaded template is byte-identical.
    path2 = tmp_path / "body2.vanmesh"
    body.save_template(path2, back)
    assert path2.read_text() == first


def test_vanmesh_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.vanmesh"
    p.write_text("VANMESH 2\ncounts 0 0 24 10\n")
    with pytest.raises(ValueError, match="VANMESH"):
        body.load_template(p)
