import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trihorn.camera import (BACKGROUND, CameraIntrinsics, CropSpec, DepthFrame, centroid_crop,
                            crop_and_normalize, image_to_crop_uv, uncrop_pose, uvd_to_xyz,
                            xyz_to_uvd)
from trihorn.data import SynthSpec, generate_frame

K500 = CameraIntrinsics(500.0, 500.0, 160.0, 160.0)


def blank_frame(H=240, W=320, K=K500, joints=((0.0, 0.0, 400.0),)):
    return DepthFrame(depth=np.zeros((H, W), dtype=np.float32), intrinsics=K, joints_xyz=joints)


class TestIntrinsics:
    def test_positive_focal(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(0.0, 1.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            CameraIntrinsics(1.0, -1.0, 0.0, 0.0)

    def test_crop_spec_validation(self):
        with pytest.raises(ValueError):
            CropSpec((0, 0, 1), cube_mm=0)
        with pytest.raises(ValueError):
            CropSpec((0, 0, 1), out_size=8)


class TestProjection:
    def test_principal_ray(self):
        np.testing.assert_allclose(xyz_to_uvd([0.0, 0.0, 700.0], K500), [160.0, 160.0, 700.0])

    def test_known_point(self):
        np.testing.assert_allclose(xyz_to_uvd([100.0, -50.0, 500.0], K500), [260.0, 110.0, 500.0])

    def test_known_inverse(self):
        np.testing.assert_allclose(uvd_to_xyz([260.0, 110.0, 500.0], K500), [100.0, -50.0, 500.0])
        np.testing.assert_allclose(uvd_to_xyz([160.0, 160.0, 321.0], K500), [0.0, 0.0, 321.0])

    def test_non_positive_depth(self):
        with pytest.raises(ValueError):
            xyz_to_uvd([1.0, 1.0, 0.0], K500)
        with pytest.raises(ValueError):
            uvd_to_xyz([1.0, 1.0, -3.0], K500)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-500, 500), st.floats(-500, 500), st.floats(1, 2000),
           st.floats(100, 1000), st.floats(100, 1000))
    def test_round_trip(self, x, y, z, fx, fy):
        K = CameraIntrinsics(fx, fy, 150.0, 110.0)
        p = np.array([x, y, z])
        np.testing.assert_allclose(uvd_to_xyz(xyz_to_uvd(p, K), K), p, atol=1e-9)

    def test_frame_uvd_consistent(self):
        f = blank_frame(joints=[[10.0, 20.0, 400.0], [-30.0, 5.0, 380.0]])
        np.testing.assert_allclose(f.joints_uvd, xyz_to_uvd(f.joints_xyz, f.intrinsics), atol=1e-3)

    def test_negative_depth_rejected(self):
        with pytest.raises(ValueError):
            DepthFrame(depth=-np.ones((4, 4)), intrinsics=K500, joints_xyz=[[0, 0, 1.0]])


class TestCrop:
    def test_all_missing_is_background(self):
        c = crop_and_normalize(blank_frame(), CropSpec((0.0, 0.0, 400.0)))
        assert c.image.shape == (128, 128)
        assert np.all(c.image == BACKGROUND)

    def test_center_depth_maps_to_zero(self):
        f = blank_frame()
        # a few pixels around the principal point, so nearest sampling hits one
        f.depth[158:163, 158:163] = 400.0
        c = crop_and_normalize(f, CropSpec((0.0, 0.0, 400.0), out_size=128))
        hand = c.image != BACKGROUND
        assert hand.sum() >= 1
        np.testing.assert_array_equal(c.image[hand], 0.0)

    def test_out_of_cube_becomes_background(self):
        f = blank_frame()
        f.depth[:, :] = 900.0
        c = crop_and_normalize(f, CropSpec((0.0, 0.0, 400.0), cube_mm=150))
        assert np.all(c.image == BACKGROUND)

    def test_affine_depth(self):
        f = blank_frame()
        f.depth[:, :] = 475.0
        c = crop_and_normalize(f, CropSpec((0.0, 0.0, 400.0), cube_mm=150))
        hand = c.image != BACKGROUND
        # the window is wider than the raster; pixels past the border are missing
        assert 0 < hand.sum() < c.image.size
        np.testing.assert_allclose(c.image[hand], 0.5)

    def test_values_in_range(self):
        f = generate_frame(SynthSpec(n_frames=1), 0)
        c = crop_and_normalize(f, centroid_crop(f))
        assert c.image.min() >= -1 and c.image.max() <= 1
        assert np.all(np.abs(c.joints_uvd_norm[:, 2]) <= 1)

    def test_window_outside_raster(self):
        f = blank_frame(joints=[[5000.0, 0.0, 400.0]])
        with pytest.raises(ValueError, match="outside"):
            crop_and_normalize(f, CropSpec((5000.0, 0.0, 400.0)))

    def test_collinear_joints_stay_collinear(self):
        K = CameraIntrinsics(475.0, 470.0, 160.0, 120.0)
        crop = CropSpec((10.0, -5.0, 420.0))
        uv = np.array([[100.0, 50.0], [130.0, 80.0], [190.0, 140.0]])
        q = image_to_crop_uv(uv, crop, K)
        cross = (q[1, 0] - q[0, 0]) * (q[2, 1] - q[0, 1]) - (q[1, 1] - q[0, 1]) * (q[2, 0] - q[0, 0])
        assert abs(cross) < 1e-6


class TestRoundTrip:
    @pytest.mark.parametrize("index", range(12))
    def test_synthetic_frames(self, index):
        f = generate_frame(SynthSpec(n_frames=12, rng_seed=5), index)
        crop = centroid_crop(f)
        c = crop_and_normalize(f, crop)
        back = uncrop_pose(c.joints_uvd_norm, crop, f.intrinsics)
        assert np.abs(back - f.joints_xyz).max() < 0.5

    def test_principal_point_case(self):
        f = blank_frame(joints=[[0.0, 0.0, 400.0]])
        crop = CropSpec((0.0, 0.0, 400.0))
        c = crop_and_normalize(f, crop)
        np.testing.assert_allclose(c.joints_uvd_norm[0], [63.5, 63.5, 0.0])
        np.testing.assert_allclose(uncrop_pose(c.joints_uvd_norm, crop, K500), [[0.0, 0.0, 400.0]], atol=1e-9)
