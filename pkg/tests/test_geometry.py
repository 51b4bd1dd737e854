"""Projection, frustum sampling, and trilinear interpolation against loop oracles."""

import json
import math

import numpy as np
import pytest
import torch

from morphview.errors import ConfigurationError
from morphview.geometry import (
    CameraParams,
    frustum_depth_samples,
    look_at_extrinsics,
    project,
    sample_frustum_points,
    trilinear_interpolate,
)


def make_camera(K=None, R=None, T=None, size=(32, 32), near=1.0, far=2.0):
    if K is None:
        K = [[40.0, 0.0, 16.0], [0.0, 40.0, 16.0], [0.0, 0.0, 1.0]]
    if R is None:
        R = np.eye(3)
    if T is None:
        T = np.zeros(3)
    return CameraParams(K=K, R=R, T=T, image_size=size, near=near, far=far)


def random_camera(rng):
    """Random valid camera looking at the origin from ~2 units out."""
    pos = rng.standard_normal(3)
    pos = 2.0 * pos / np.linalg.norm(pos)
    R, T = look_at_extrinsics(pos, roll_deg=rng.uniform(0, 360))
    fx = rng.uniform(20, 80)
    fy = rng.uniform(20, 80)
    K = [[fx, rng.uniform(-1, 1), rng.uniform(10, 20)],
         [0.0, fy, rng.uniform(10, 20)],
         [0.0, 0.0, 1.0]]
    return CameraParams(K=K, R=R, T=T, image_size=(32, 32), near=1.0, far=3.0)


def project_oracle(points, camera):
    """Scalar per-point matrix-multiply-and-dehomogenize oracle."""
    K = camera.K.numpy()
    R = camera.R.numpy()
    T = camera.T.numpy()
    out = np.zeros((len(points), 3))
    for i, p in enumerate(points):
        cam = R @ np.asarray(p, dtype=np.float64) + T
        h = K @ cam
        out[i, 0] = h[0] / cam[2]
        out[i, 1] = h[1] / cam[2]
        out[i, 2] = cam[2]
    return out


class TestCameraParams:
    def test_rejects_non_rotation(self):
        with pytest.raises(ConfigurationError):
            make_camera(R=np.eye(3) * 2.0)

    def test_rejects_reflection(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ConfigurationError):
            make_camera(R=R)

    def test_rejects_bad_intrinsics(self):
        with pytest.raises(ConfigurationError):
            make_camera(K=[[40, 0, 16], [1, 40, 16], [0, 0, 1]])
        with pytest.raises(ConfigurationError):
            make_camera(K=[[40, 0, 16], [0, 40, 16], [0, 0, 2]])

    def test_rejects_bad_depth_range(self):
        with pytest.raises(ConfigurationError):
            make_camera(near=2.0, far=1.0)
        with pytest.raises(ConfigurationError):
            make_camera(near=0.0, far=1.0)

    def test_json_round_trip_preserves_float64(self):
        rng = np.random.default_rng(7)
        cam = random_camera(rng)
        back = CameraParams.from_json(cam.to_json())
        assert torch.equal(back.K, cam.K)
        assert torch.equal(back.R, cam.R)
        assert torch.equal(back.T, cam.T)
        assert back.image_size == cam.image_size
        assert back.near == cam.near and back.far == cam.far

    def test_json_schema_fields(self):
        d = json.loads(make_camera().to_json())
        assert set(d) == {"K", "R", "T", "size", "near", "far"}
        assert d["size"] == [32, 32]


class TestProject:
    def test_unit_focal_point(self):
        # R=I, T=0, f=2, principal point (0,0): (1,0,2) -> u = 2*1/2 = 1
        cam = make_camera(K=[[2.0, 0, 0], [0, 2.0, 0], [0, 0, 1.0]])
        uvz, valid = project(torch.tensor([[1.0, 0.0, 2.0]], dtype=torch.float64), cam)
        assert valid.all()
        assert torch.allclose(uvz, torch.tensor([[1.0, 0.0, 2.0]], dtype=torch.float64))

    def test_optical_axis_hits_principal_point(self):
        cam = make_camera(K=[[55.0, 0, 11.5], [0, 44.0, 7.25], [0, 0, 1.0]])
        uvz, valid = project(torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64), cam)
        assert valid.all()
        assert torch.allclose(uvz, torch.tensor([[11.5, 7.25, 1.0]], dtype=torch.float64))

    def test_matches_loop_oracle_on_random_points(self):
        rng = np.random.default_rng(42)
        cam = random_camera(rng)
        # points near the origin, guaranteed in front of a camera 2 units out
        pts = rng.uniform(-0.4, 0.4, size=(100, 3))
        uvz, valid = project(torch.from_numpy(pts), cam)
        assert valid.all()
        expected = project_oracle(pts, cam)
        np.testing.assert_allclose(uvz.numpy(), expected, atol=1e-9)

    def test_behind_camera_flagged_with_z_unchanged(self):
        cam = make_camera()
        pts = torch.tensor([[0.0, 0.0, -1.5], [0.0, 0.0, 1.5]], dtype=torch.float64)
        uvz, valid = project(pts, cam)
        assert valid.tolist() == [False, True]
        assert uvz[0, 2].item() == -1.5
        assert torch.isfinite(uvz).all()

    def test_depth_epsilon_boundary(self):
        cam = make_camera()
        pts = torch.tensor([[0.0, 0.0, 1e-7], [0.0, 0.0, 1e-3]], dtype=torch.float64)
        _, valid = project(pts, cam)
        assert valid.tolist() == [False, True]

    def test_scaling_camera_space_point_fixes_uv(self):
        # 1-homogeneity: scaling the camera-space coordinates by s scales z,
        # leaves (u, v) fixed
        rng = np.random.default_rng(3)
        cam = random_camera(rng)
        R = cam.R.numpy()
        T = cam.T.numpy()
        p_cam = np.array([0.2, -0.1, 2.0])
        for s in (0.5, 1.0, 3.7):
            p_world = R.T @ (s * p_cam - T)
            uvz, valid = project(torch.tensor(p_world[None, :]), cam)
            assert valid.all()
            base = project_oracle([R.T @ (p_cam - T)], cam)
            np.testing.assert_allclose(uvz[0, :2].numpy(), base[0, :2], atol=1e-9)
            assert uvz[0, 2].item() == pytest.approx(s * 2.0, abs=1e-9)

    def test_rejects_non_finite_points(self):
        cam = make_camera()
        with pytest.raises(ConfigurationError):
            project(torch.tensor([[np.nan, 0.0, 1.0]]), cam)


class TestFrustumSampling:
    def test_depth_samples_inclusive_endpoints(self):
        cam = make_camera(near=1.0, far=2.0)
        depths = frustum_depth_samples(cam, 3)
        assert depths.tolist() == [1.0, 1.5, 2.0]

    def test_paper_shape_contract(self):
        cam = make_camera()
        pts = sample_frustum_points(cam, 48, 32, 32)
        assert tuple(pts.shape) == (48, 32, 32, 3)

    def test_round_trip_through_project(self):
        rng = np.random.default_rng(11)
        cam = random_camera(rng)
        d_f, h_f, w_f = 5, 8, 8
        pts = sample_frustum_points(cam, d_f, h_f, w_f)
        uvz, valid = project(pts.reshape(-1, 3), cam)
        assert valid.all()
        uvz = uvz.reshape(d_f, h_f, w_f, 3)
        H, W = cam.image_size
        for k, depth in enumerate(frustum_depth_samples(cam, d_f).tolist()):
            for i in range(h_f):
                for j in range(w_f):
                    u_exp = (j + 0.5) * W / w_f
                    v_exp = (i + 0.5) * H / h_f
                    assert uvz[k, i, j, 0].item() == pytest.approx(u_exp, abs=1e-6)
                    assert uvz[k, i, j, 1].item() == pytest.approx(v_exp, abs=1e-6)
                    assert uvz[k, i, j, 2].item() == pytest.approx(depth, abs=1e-6)

    def test_counts_validated(self):
        cam = make_camera()
        with pytest.raises(ConfigurationError):
            sample_frustum_points(cam, 1, 4, 4)
        with pytest.raises(ConfigurationError):
            sample_frustum_points(cam, 4, 1, 4)


def interp_oracle(volume, lo, hi, point):
    """Direct 8-corner blend with zero padding, scalar arithmetic only."""
    nx, ny, nz, c = volume.shape
    if np.any(point < lo) or np.any(point > hi):
        return np.zeros(c)
    cell = (hi - lo) / np.array([nx, ny, nz])
    g = (point - lo) / cell - 0.5
    base = np.floor(g).astype(int)
    frac = g - base
    out = np.zeros(c)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix, iy, iz = base[0] + dx, base[1] + dy, base[2] + dz
                if not (0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz):
                    continue
                w = ((frac[0] if dx else 1 - frac[0])
                     * (frac[1] if dy else 1 - frac[1])
                     * (frac[2] if dz else 1 - frac[2]))
                out += w * volume[ix, iy, iz]
    return out


class TestTrilinearInterpolate:
    lo = torch.tensor([-1.0, -1.0, -1.0], dtype=torch.float64)
    hi = torch.tensor([1.0, 1.0, 1.0], dtype=torch.float64)

    def centers(self, n):
        s = 2.0 / n
        return -1.0 + (np.arange(n) + 0.5) * s

    def test_query_at_voxel_center_returns_that_voxel(self):
        rng = np.random.default_rng(0)
        vol = torch.from_numpy(rng.standard_normal((4, 4, 4, 3)))
        cx = self.centers(4)
        q = torch.tensor([[cx[1], cx[2], cx[3]]], dtype=torch.float64)
        out = trilinear_interpolate(vol, self.lo, self.hi, q)
        assert torch.allclose(out[0], vol[1, 2, 3], atol=1e-12)

    def test_centroid_of_eight_centers_is_mean(self):
        rng = np.random.default_rng(1)
        vol = torch.from_numpy(rng.standard_normal((4, 4, 4, 2)))
        cx = self.centers(4)
        q = torch.tensor([[(cx[0] + cx[1]) / 2] * 3], dtype=torch.float64)
        out = trilinear_interpolate(vol, self.lo, self.hi, q)
        expected = vol[0:2, 0:2, 0:2].reshape(8, 2).mean(dim=0)
        assert torch.allclose(out[0], expected, atol=1e-12)

    def test_affine_field_reproduced_exactly(self):
        # volume sampled from f(p) = a . p + b is reproduced at interior points
        a = np.array([0.3, -0.7, 1.1])
        b = 0.25
        n = 6
        cx = self.centers(n)
        vol = np.zeros((n, n, n, 1))
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    vol[i, j, k, 0] = a @ np.array([cx[i], cx[j], cx[k]]) + b
        rng = np.random.default_rng(5)
        # interior of the voxel-center hull so no zero padding is touched
        pts = rng.uniform(cx[0], cx[-1], size=(1000, 3))
        out = trilinear_interpolate(torch.from_numpy(vol), self.lo, self.hi,
                                    torch.from_numpy(pts))
        expected = pts @ a + b
        np.testing.assert_allclose(out.numpy()[:, 0], expected, atol=1e-6)

    def test_outside_bbox_returns_zeros(self):
        vol = torch.ones((2, 2, 2, 4), dtype=torch.float64)
        q = torch.tensor([[1.5, 0.0, 0.0], [0.0, -3.0, 0.0]], dtype=torch.float64)
        out = trilinear_interpolate(vol, self.lo, self.hi, q)
        assert torch.equal(out, torch.zeros(2, 4, dtype=torch.float64))

    def test_matches_loop_oracle_random(self):
        rng = np.random.default_rng(9)
        vol = rng.standard_normal((5, 4, 6, 3))
        pts = rng.uniform(-1.2, 1.2, size=(500, 3))
        out = trilinear_interpolate(torch.from_numpy(vol), self.lo, self.hi,
                                    torch.from_numpy(pts))
        for i in range(len(pts)):
            expected = interp_oracle(vol, self.lo.numpy(), self.hi.numpy(), pts[i])
            np.testing.assert_allclose(out[i].numpy(), expected, atol=1e-9)

    def test_continuous_across_cell_boundaries(self):
        rng = np.random.default_rng(13)
        vol = torch.from_numpy(rng.standard_normal((4, 4, 4, 2)))
        cx = self.centers(4)
        # shared face between cells along x sits halfway between centers 1 and 2
        face_x = (cx[1] + cx[2]) / 2
        for _ in range(20):
            y, z = rng.uniform(cx[0], cx[-1], size=2)
            lo_side = trilinear_interpolate(
                vol, self.lo, self.hi,
                torch.tensor([[face_x - 1e-7, y, z]], dtype=torch.float64))
            hi_side = trilinear_interpolate(
                vol, self.lo, self.hi,
                torch.tensor([[face_x + 1e-7, y, z]], dtype=torch.float64))
            assert (lo_side - hi_side).abs().max().item() < 1e-5

    def test_purity_bitwise(self):
        rng = np.random.default_rng(21)
        vol = torch.from_numpy(rng.standard_normal((4, 4, 4, 2)))
        pts = torch.from_numpy(rng.uniform(-1, 1, size=(64, 3)))
        a = trilinear_interpolate(vol, self.lo, self.hi, pts)
        b = trilinear_interpolate(vol, self.lo, self.hi, pts)
        assert torch.equal(a, b)

    def test_gradient_flows_to_volume(self):
        vol = torch.randn(3, 3, 3, 2, dtype=torch.float64, requires_grad=True)
        pts = torch.tensor([[0.1, -0.2, 0.3]], dtype=torch.float64)
        out = trilinear_interpolate(vol, self.lo, self.hi, pts)
        out.sum().backward()
        assert vol.grad is not None
        assert vol.grad.abs().sum() > 0
