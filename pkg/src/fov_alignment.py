"""FOV alignment pre-processing.

Every input is cropped to the region equivalent to a fixed target FOV
(w' = 2 fx tan(wx/2), h' = 2 fy tan(wy/2)), centered on the principal point,
padded with color 255 where the crop leaves the source image, and resized to
the network resolution. inverse_align maps a prediction back onto the
source pixel grid for evaluation within the same FOV.
"""
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import cv2
import numpy as np

from bincore import DepthMap
from errors import ContractError, DegenerateCropError

PAD_VALUE = 255

DEFAULT_FOV_DEG = (58.0, 45.0)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels; principal point defaults to the image
    center."""
    fx: float
    fy: float
    width: int
    height: int
    cx: Optional[float] = None
    cy: Optional[float] = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("Focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ContractError("Image size must be at least 1x1")
        if self.cx is None:
            object.__setattr__(self, 'cx', self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, 'cy', self.height / 2.0)

    @classmethod
    def from_dict(cls, data, width, height):
        """Create intrinsics from a sidecar dict with keys fx, fy, cx, cy."""
        return cls(
            fx=float(data['fx']), fy=float(data['fy']),
            width=int(width), height=int(height),
            cx=None if data.get('cx') is None else float(data['cx']),
            cy=None if data.get('cy') is None else float(data['cy'])
        )

    def hflip(self):
        """Intrinsics of the horizontally mirrored image."""
        return CameraIntrinsics(
            self.fx, self.fy, self.width, self.height,
            self.width - self.cx, self.cy
        )

    def fov(self):
        """Return (horizontal, vertical) FOV in radians."""
        return (
            2 * math.atan(self.width / (2 * self.fx)),
            2 * math.atan(self.height / (2 * self.fy))
        )


@dataclass(frozen=True)
class FovSpec:
    """Target FOV (radians) and network resolution (pixels)."""
    omega_x: float
    omega_y: float
    target_w: int
    target_h: int

    def __post_init__(self):
        for omega in (self.omega_x, self.omega_y):
            if not 0 < omega < math.pi:
                raise ContractError("FOV angles must lie in (0, pi)")
        if self.target_w < 1 or self.target_h < 1:
            raise ContractError("Target resolution must be at least 1x1")

    @classmethod
    def from_degrees(cls, fov_x_deg, fov_y_deg, target_w, target_h):
        return cls(
            math.radians(fov_x_deg), math.radians(fov_y_deg),
            int(target_w), int(target_h)
        )


class CropSize(NamedTuple):
    width: int
    height: int
    degenerate: bool


@dataclass
class AlignedSample:
    """FOV normalized sample plus the geometry to undo the alignment.

    crop_rect is (x0, y0, w', h') in source pixels, scale (w/w', h/h').
    """
    image: np.ndarray
    depth: Optional[DepthMap]
    pad_mask: np.ndarray
    crop_rect: tuple
    scale: tuple


def target_crop_size(intr, fov):
    """Source region size equivalent to the target FOV.

    :param CameraIntrinsics intr: Source intrinsics
    :param FovSpec fov: Target FOV
    """
    raw_w = 2 * intr.fx * math.tan(fov.omega_x / 2)
    raw_h = 2 * intr.fy * math.tan(fov.omega_y / 2)
    width, height = int(round(raw_w)), int(round(raw_h))
    degenerate = width < 1 or height < 1
    return CropSize(max(width, 1), max(height, 1), degenerate)


def crop_rect(intr, fov):
    """Return (x0, y0, w', h') of the crop centered on (cx, cy)."""
    size = target_crop_size(intr, fov)
    if size.degenerate:
        raise DegenerateCropError(
            "FOV crop is degenerate for fx=%s, fy=%s" % (intr.fx, intr.fy)
        )
    x0 = int(round(intr.cx - size.width / 2.0))
    y0 = int(round(intr.cy - size.height / 2.0))
    return (x0, y0, size.width, size.height)


def _overlap(rect, width, height):
    """Return source and crop slices of the part of rect inside the image."""
    x0, y0, w, h = rect
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + w, width), min(y0 + h, height)
    if sx1 <= sx0 or sy1 <= sy0:
        return None
    source = (slice(sy0, sy1), slice(sx0, sx1))
    crop = (slice(sy0 - y0, sy1 - y0), slice(sx0 - x0, sx1 - x0))
    return source, crop


def align_fov(image, depth, intr, fov):
    """Crop, pad and resize a source image (and depth) to the target FOV.

    Color is resized bilinearly, depth and pad mask with nearest neighbour.
    Padded pixels are 255 in color and invalid in depth.

    :param ndarray image: Source color (H, W, 3), uint8
    :param DepthMap depth: Optional source depth (H, W)
    :param CameraIntrinsics intr: Source intrinsics
    :param FovSpec fov: Target FOV and resolution
    """
    height, width = image.shape[:2]
    if (width, height) != (intr.width, intr.height):
        raise ContractError(
            "Image size %dx%d does not match intrinsics %dx%d"
            % (width, height, intr.width, intr.height)
        )

    rect = crop_rect(intr, fov)
    _, _, crop_w, crop_h = rect

    crop_image = np.full((crop_h, crop_w, 3), PAD_VALUE, dtype=image.dtype)
    crop_pad = np.ones((crop_h, crop_w), dtype=bool)
    crop_depth = np.zeros((crop_h, crop_w), dtype=np.float32)
    crop_valid = np.zeros((crop_h, crop_w), dtype=bool)

    overlap = _overlap(rect, width, height)
    if overlap is not None:
        source, crop = overlap
        crop_image[crop] = image[source]
        crop_pad[crop] = False
        if depth is not None:
            crop_depth[crop] = depth.depth[source]
            crop_valid[crop] = depth.valid[source]

    size = (fov.target_w, fov.target_h)
    aligned_image = cv2.resize(crop_image, size, interpolation=cv2.INTER_LINEAR)
    pad_mask = cv2.resize(
        crop_pad.astype(np.uint8), size, interpolation=cv2.INTER_NEAREST
    ).astype(bool)
    aligned_image[pad_mask] = PAD_VALUE

    aligned_depth = None
    if depth is not None:
        resized = cv2.resize(crop_depth, size, interpolation=cv2.INTER_NEAREST)
        valid = cv2.resize(
            crop_valid.astype(np.uint8), size, interpolation=cv2.INTER_NEAREST
        ).astype(bool) & ~pad_mask
        resized[~valid] = 0.0
        aligned_depth = DepthMap(resized, valid)

    return AlignedSample(
        image=aligned_image,
        depth=aligned_depth,
        pad_mask=pad_mask,
        crop_rect=rect,
        scale=(fov.target_w / crop_w, fov.target_h / crop_h)
    )


def inverse_align(pred, sample, intr):
    """Map an aligned prediction back to the source resolution.

    Pixels outside the crop, and crop pixels that were padding, are invalid.

    :param DepthMap pred: Prediction at the network resolution (h, w)
    :param AlignedSample sample: Alignment geometry
    :param CameraIntrinsics intr: Source intrinsics
    """
    target_h, target_w = sample.pad_mask.shape
    if tuple(pred.depth.shape) != (target_h, target_w):
        raise ContractError(
            "Prediction %s does not match aligned size %s"
            % (tuple(pred.depth.shape), (target_h, target_w))
        )
    x0, y0, crop_w, crop_h = sample.crop_rect
    expected = (target_w / crop_w, target_h / crop_h)
    if not np.allclose(expected, sample.scale):
        raise ContractError("Alignment scale is inconsistent with crop rect")

    overlap = _overlap(sample.crop_rect, intr.width, intr.height)
    if overlap is None:
        raise ContractError("Crop rect lies outside the source image")

    size = (crop_w, crop_h)
    restored = cv2.resize(
        np.asarray(pred.depth, dtype=np.float32), size,
        interpolation=cv2.INTER_NEAREST
    )
    restored_valid = cv2.resize(
        (np.asarray(pred.valid) & ~sample.pad_mask).astype(np.uint8), size,
        interpolation=cv2.INTER_NEAREST
    ).astype(bool)

    depth = np.zeros((intr.height, intr.width), dtype=np.float32)
    valid = np.zeros((intr.height, intr.width), dtype=bool)
    source, crop = overlap
    depth[source] = restored[crop]
    valid[source] = restored_valid[crop]
    depth[~valid] = 0.0
    return DepthMap(depth, valid)
