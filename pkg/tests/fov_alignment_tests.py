import math
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from bincore import DepthMap
from errors import ContractError, DegenerateCropError
from fov_alignment import (
    PAD_VALUE, CameraIntrinsics, FovSpec, align_fov, crop_rect, inverse_align,
    target_crop_size
)


def rgb(width, height, value=100):
    return np.full((height, width, 3), value, dtype=np.uint8)


class CropSizeTestCase(unittest.TestCase):
    """Test case for the FOV equivalent crop"""

    def setUp(self):
        self.fov = FovSpec.from_degrees(58, 45, 512, 384)

    def test_target_crop_size(self):
        intr = CameraIntrinsics(1091.517, 1091.517, 1280, 960)
        size = target_crop_size(intr, self.fov)
        self.assertFalse(size.degenerate)
        self.assertLessEqual(abs(size.width - 1210), 1)
        self.assertLessEqual(abs(size.height - 904), 1)

        size = target_crop_size(CameraIntrinsics(500, 500, 640, 480), self.fov)
        self.assertEqual((size.width, size.height), (554, 414))

    def test_crop_rect_centered(self):
        rect = crop_rect(CameraIntrinsics(500, 500, 640, 480), self.fov)
        self.assertEqual(rect, (43, 33, 554, 414))

        rect = crop_rect(CameraIntrinsics(500, 500, 640, 480, cx=100.0, cy=240.0), self.fov)
        self.assertEqual(rect[0], -177)

    def test_degenerate(self):
        intr = CameraIntrinsics(0.4, 0.4, 8, 8)
        self.assertTrue(target_crop_size(intr, self.fov).degenerate)
        with self.assertRaises(DegenerateCropError):
            crop_rect(intr, self.fov)
        with self.assertRaises(DegenerateCropError):
            align_fov(rgb(8, 8), None, intr, self.fov)

    def test_invalid_geometry(self):
        with self.assertRaises(ContractError):
            CameraIntrinsics(-1.0, 500, 640, 480)
        with self.assertRaises(ContractError):
            FovSpec.from_degrees(180, 45, 512, 384)
        with self.assertRaises(ContractError):
            FovSpec.from_degrees(58, 45, 0, 384)

    def test_intrinsics(self):
        intr = CameraIntrinsics(500, 500, 640, 480, cx=300.0)
        self.assertEqual(intr.cy, 240.0)
        self.assertEqual(intr.hflip().cx, 340.0)
        intr = CameraIntrinsics.from_dict({'fx': 500, 'fy': 400}, 640, 480)
        self.assertEqual((intr.cx, intr.cy), (320.0, 240.0))
        fov_x, fov_y = CameraIntrinsics(500, 500, 1000, 1000).fov()
        self.assertAlmostEqual(fov_x, math.pi / 2)
        self.assertAlmostEqual(fov_y, math.pi / 2)


class AlignTestCase(unittest.TestCase):
    """Test case for FOV alignment and its inverse"""

    def setUp(self):
        self.fov = FovSpec.from_degrees(58, 45, 128, 96)

    def test_crop_inside_image(self):
        intr = CameraIntrinsics(500, 500, 640, 480)
        depth = DepthMap.from_depth(np.full((480, 640), 3.0, dtype=np.float32))
        sample = align_fov(rgb(640, 480), depth, intr, self.fov)

        self.assertEqual(sample.image.shape, (96, 128, 3))
        self.assertEqual(sample.depth.depth.shape, (96, 128))
        self.assertFalse(sample.pad_mask.any())
        self.assertTrue(sample.depth.valid.all())
        self.assertTrue(np.all(sample.image == 100))
        self.assertAlmostEqual(sample.scale[0], 128 / 554.0)
        self.assertAlmostEqual(sample.scale[1], 96 / 414.0)

    def test_padding(self):
        intr = CameraIntrinsics(300, 300, 320, 240)
        depth = DepthMap.from_depth(np.full((240, 320), 2.0, dtype=np.float32))
        sample = align_fov(rgb(320, 240), depth, intr, self.fov)

        self.assertTrue(sample.pad_mask.any())
        self.assertTrue(np.all(sample.image[sample.pad_mask] == PAD_VALUE))
        self.assertFalse(sample.depth.valid[sample.pad_mask].any())
        self.assertTrue(np.all(sample.depth.depth[sample.pad_mask] == 0.0))
        inside = ~sample.pad_mask
        self.assertTrue(np.all(sample.depth.depth[inside] == 2.0))

    @settings(max_examples=40, deadline=None)
    @given(
        st.floats(60.0, 400.0), st.floats(60.0, 400.0),
        st.floats(0.0, 160.0), st.floats(0.0, 120.0), st.integers(0, 2 ** 16)
    )
    def test_pad_pixels_are_white(self, fx, fy, cx, cy, seed):
        image = np.random.default_rng(seed).integers(0, 200, (120, 160, 3), dtype=np.uint8)
        depth = DepthMap.from_depth(np.full((120, 160), 5.0, dtype=np.float32))
        intr = CameraIntrinsics(fx, fy, 160, 120, cx=cx, cy=cy)
        sample = align_fov(image, depth, intr, self.fov)

        self.assertTrue(np.all(sample.image[sample.pad_mask] == PAD_VALUE))
        self.assertFalse(sample.depth.valid[sample.pad_mask].any())

    def test_off_center_principal_point(self):
        intr = CameraIntrinsics(500, 500, 640, 480, cx=100.0)
        sample = align_fov(rgb(640, 480), None, intr, self.fov)
        self.assertIsNone(sample.depth)
        # left part of the crop lies outside the image
        self.assertTrue(sample.pad_mask[:, 0].all())
        self.assertFalse(sample.pad_mask[:, -1].any())

    def test_size_mismatch(self):
        intr = CameraIntrinsics(500, 500, 640, 480)
        with self.assertRaises(ContractError):
            align_fov(rgb(320, 240), None, intr, self.fov)

    def test_round_trip(self):
        intr = CameraIntrinsics(500, 500, 640, 480)
        source = DepthMap.from_depth(np.full((480, 640), 4.5, dtype=np.float32))
        sample = align_fov(rgb(640, 480), source, intr, self.fov)
        restored = inverse_align(sample.depth, sample, intr)

        self.assertEqual(restored.depth.shape, (480, 640))
        x0, y0, w, h = sample.crop_rect
        self.assertTrue(restored.valid[y0:y0 + h, x0:x0 + w].all())
        self.assertFalse(restored.valid[:, :x0].any())
        self.assertFalse(restored.valid[:y0].any())
        self.assertFalse(restored.valid[:, x0 + w:].any())
        error = np.abs(restored.depth[restored.valid] - 4.5)
        self.assertLess(float(error.max()), 1e-3)

    def test_round_trip_with_padding(self):
        intr = CameraIntrinsics(300, 300, 320, 240)
        source = DepthMap.from_depth(np.full((240, 320), 7.0, dtype=np.float32))
        sample = align_fov(rgb(320, 240), source, intr, self.fov)
        restored = inverse_align(sample.depth, sample, intr)
        self.assertEqual(restored.depth.shape, (240, 320))
        self.assertTrue(restored.valid.any())
        self.assertTrue(np.all(restored.depth[restored.valid] == 7.0))
        self.assertTrue(np.all(restored.depth[~restored.valid] == 0.0))

    def test_inverse_shape_mismatch(self):
        intr = CameraIntrinsics(500, 500, 640, 480)
        sample = align_fov(rgb(640, 480), None, intr, self.fov)
        pred = DepthMap.from_depth(np.ones((10, 10), dtype=np.float32))
        with self.assertRaises(ContractError):
            inverse_align(pred, sample, intr)
