"""Blendshape arithmetic, keypoints, and the icosphere template builder."""

import numpy as np
import pytest
import torch

from morphview.errors import ConfigurationError, DegenerateNormalizerError
from morphview.geometry import CameraParams, look_at_extrinsics, project
from morphview.morphable import (
    MorphCoeffs,
    MorphableModel,
    build_mesh,
    icosphere,
    intercanthal_distance,
    load_model,
    make_default_model,
    mesh_keypoints_3d,
    mouth_keypoint_slots,
    save_model,
)


@pytest.fixture(scope="module")
def model():
    return make_default_model(seed=0)


def coeffs_for(model, identity=None, expression=None):
    beta = np.zeros(model.identity_dim) if identity is None else identity
    theta = np.zeros(model.expression_dim) if expression is None else expression
    return MorphCoeffs(identity=beta, expression=theta)


class TestIcosphere:
    def test_vertex_counts(self):
        for subdiv, (nv, nf) in enumerate([(12, 20), (42, 80), (162, 320), (642, 1280)]):
            verts, faces = icosphere(subdiv)
            assert verts.shape == (nv, 3)
            assert faces.shape == (nf, 3)

    def test_vertices_on_unit_sphere(self):
        verts, _ = icosphere(2)
        np.testing.assert_allclose(np.linalg.norm(verts, axis=1), 1.0, atol=1e-12)

    def test_faces_consistently_wound_outward(self):
        verts, faces = icosphere(1)
        tri = verts[faces]
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        centers = tri.mean(axis=1)
        assert (np.einsum("ij,ij->i", normals, centers) > 0).all()


class TestBuildMesh:
    def test_zero_coeffs_is_template(self, model):
        v = build_mesh(model, coeffs_for(model))
        assert torch.equal(v, model.template)

    def test_unit_identity_coeff_adds_basis_slice(self, model):
        beta = np.zeros(model.identity_dim)
        beta[0] = 1.0
        v = build_mesh(model, coeffs_for(model, identity=beta))
        expected = model.template + model.identity_basis[:, :, 0]
        assert torch.allclose(v, expected, atol=1e-15)

    def test_matches_scalar_loop_oracle(self, model):
        rng = np.random.default_rng(17)
        beta = rng.uniform(-2, 2, model.identity_dim)
        theta = rng.uniform(-2, 2, model.expression_dim)
        v = build_mesh(model, coeffs_for(model, beta, theta)).numpy()
        tpl = model.template.numpy()
        ib = model.identity_basis.numpy()
        eb = model.expression_basis.numpy()
        expected = tpl.copy()
        for i in range(model.n_vertices):
            for ax in range(3):
                for t in range(model.identity_dim):
                    expected[i, ax] += ib[i, ax, t] * beta[t]
                for t in range(model.expression_dim):
                    expected[i, ax] += eb[i, ax, t] * theta[t]
        np.testing.assert_allclose(v, expected, atol=1e-9)

    def test_affine_identity(self, model):
        rng = np.random.default_rng(5)
        b1 = rng.uniform(-1, 1, model.identity_dim)
        b2 = rng.uniform(-1, 1, model.identity_dim)
        th = rng.uniform(-1, 1, model.expression_dim)
        lhs = build_mesh(model, coeffs_for(model, b1 + b2, th)) + model.template
        rhs = (build_mesh(model, coeffs_for(model, b1, th))
               + build_mesh(model, coeffs_for(model, b2)))
        assert torch.allclose(lhs, rhs, atol=1e-9)

    def test_expression_moves_only_supported_vertices(self, model):
        theta = np.zeros(model.expression_dim)
        theta[0] = 2.0
        moved = (build_mesh(model, coeffs_for(model, expression=theta))
                 - model.template).abs().sum(dim=1)
        support = model.expression_basis[:, :, 0].abs().sum(dim=1)
        assert torch.equal(moved > 1e-12, support > 1e-12 * 0.5)

    def test_dimension_mismatch_raises(self, model):
        bad = MorphCoeffs(identity=np.zeros(model.identity_dim + 1),
                          expression=np.zeros(model.expression_dim))
        with pytest.raises(ConfigurationError):
            build_mesh(model, bad)

    def test_coeff_bound_enforced(self):
        with pytest.raises(ConfigurationError):
            MorphCoeffs(identity=[4.0], expression=[0.0])


class TestKeypoints:
    def test_single_index_returns_first_vertex(self, model):
        verts = model.template
        tiny = MorphableModel(
            template=verts, identity_basis=model.identity_basis,
            expression_basis=model.expression_basis, faces=model.faces,
            keypoint_indices=[0, 5], eye_corner_slots=(0, 1))
        kp = mesh_keypoints_3d(tiny, verts)
        assert torch.equal(kp[0], verts[0])

    def test_matches_direct_indexing(self, model):
        kp = mesh_keypoints_3d(model, model.template)
        assert torch.equal(kp, model.template[model.keypoint_indices])

    def test_keypoints_move_by_restricted_basis(self, model):
        rng = np.random.default_rng(23)
        beta = rng.uniform(-2, 2, model.identity_dim)
        theta = rng.uniform(-2, 2, model.expression_dim)
        verts = build_mesh(model, coeffs_for(model, beta, theta))
        kp = mesh_keypoints_3d(model, verts)
        rows = model.keypoint_indices
        expected = (model.template[rows]
                    + model.identity_basis[rows] @ torch.tensor(beta)
                    + model.expression_basis[rows] @ torch.tensor(theta))
        assert torch.allclose(kp, expected, atol=1e-12)

    def test_roll_equivariance_of_projected_keypoints(self, model):
        # rotating the camera about its optical axis rotates projected
        # keypoints about the principal point (needs fx == fy)
        K = [[50.0, 0.0, 16.0], [0.0, 50.0, 16.0], [0.0, 0.0, 1.0]]
        pos = (0.0, 0.0, 1.5)
        kp3d = mesh_keypoints_3d(model, model.template)
        R0, T0 = look_at_extrinsics(pos)
        cam0 = CameraParams(K=K, R=R0, T=T0, image_size=(32, 32), near=1.0, far=2.0)
        uv0, valid0 = project(kp3d, cam0)
        angle = 33.0
        R1, T1 = look_at_extrinsics(pos, roll_deg=angle)
        cam1 = CameraParams(K=K, R=R1, T=T1, image_size=(32, 32), near=1.0, far=2.0)
        uv1, valid1 = project(kp3d, cam1)
        assert valid0.all() and valid1.all()
        a = np.radians(angle)
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        centered = uv0[:, :2].numpy() - [16.0, 16.0]
        expected = centered @ rot.T + [16.0, 16.0]
        np.testing.assert_allclose(uv1[:, :2].numpy(), expected, atol=1e-6)

    def test_mouth_slots_nonempty(self, model):
        slots = mouth_keypoint_slots(model)
        assert len(slots) >= 4
        # mouth slots should respond to the mouth-open expression slice
        theta = np.zeros(model.expression_dim)
        theta[0] = 2.0
        verts = build_mesh(model, coeffs_for(model, expression=theta))
        moved = (mesh_keypoints_3d(model, verts)
                 - mesh_keypoints_3d(model, model.template)).norm(dim=1)
        assert moved[slots].min() > 1e-4


class TestIntercanthal:
    def test_three_four_five(self):
        kps = torch.tensor([[0.0, 0.0], [3.0, 4.0]])
        assert intercanthal_distance(kps, (0, 1)) == pytest.approx(5.0)

    def test_coincident_corners_degenerate(self):
        kps = torch.tensor([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
        with pytest.raises(DegenerateNormalizerError):
            intercanthal_distance(kps, (0, 1))

    def test_matches_norm_oracle(self):
        rng = np.random.default_rng(2)
        kps = rng.uniform(0, 32, size=(16, 2))
        d = intercanthal_distance(torch.from_numpy(kps), (3, 11))
        assert d == pytest.approx(np.linalg.norm(kps[3] - kps[11]), abs=1e-12)

    def test_slot_validation(self):
        kps = torch.zeros(4, 2)
        with pytest.raises(ConfigurationError):
            intercanthal_distance(kps, (2, 2))
        with pytest.raises(ConfigurationError):
            intercanthal_distance(kps, (0, 9))


class TestDefaultModel:
    def test_desk_scale_dimensions(self, model):
        assert model.n_vertices == 642
        assert model.identity_dim == 8
        assert model.expression_dim == 6
        assert model.keypoint_count == 16

    def test_keypoints_distinct(self, model):
        assert model.keypoint_indices.unique().numel() == 16

    def test_eye_corners_separated_in_x(self, model):
        kp = mesh_keypoints_3d(model, model.template)
        a, b = model.eye_corner_slots
        assert abs(kp[a, 0].item() - kp[b, 0].item()) > 0.15

    def test_deterministic_per_seed(self):
        a = make_default_model(seed=7)
        b = make_default_model(seed=7)
        assert torch.equal(a.identity_basis, b.identity_basis)
        c = make_default_model(seed=8)
        assert not torch.equal(a.identity_basis, c.identity_basis)


class TestModelArchive:
    def test_round_trip(self, model, tmp_path):
        path = tmp_path / "model.bin"
        save_model(model, path)
        back = load_model(path)
        # stored as float32, so compare at that precision
        assert torch.allclose(back.template, model.template, atol=1e-6)
        assert torch.equal(back.faces, model.faces)
        assert torch.equal(back.keypoint_indices, model.keypoint_indices)
        assert back.eye_corner_slots == model.eye_corner_slots
        assert back.vertex_color_basis is not None

    def test_rejects_other_archives(self, tmp_path):
        from morphview.archive import write_archive
        path = tmp_path / "other.bin"
        write_archive(path, {"kind": "something-else"}, {"x": np.zeros(3, np.float32)})
        with pytest.raises(ConfigurationError):
            load_model(path)
