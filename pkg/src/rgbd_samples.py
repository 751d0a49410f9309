"""RGB-D ingestion, training time augmentation and depth raster output.

Dataset directories use the layout

    <root>/rgb/<id>.png
    <root>/depth/<id>.png          16-bit, meters = value * depth_scale
    <root>/intrinsics/<id>.json    fx, fy, cx, cy, depth_scale, max_range,
                                   indoor_flag
"""
import json
import os
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from bincore import DepthMap
from errors import (
    ContractError, MissingFileError, MissingIntrinsicsError, RegistrationError,
    UnreadableRasterError
)
from fov_alignment import CameraIntrinsics

DEFAULT_DEPTH_SCALE = 1e-3
UINT16_MAX = np.iinfo(np.uint16).max

# photometric jitter amplitude
JITTER = 0.1


@dataclass
class DepthSample:
    """Registered color image, metric depth and intrinsics.

    meta holds dataset_id, frame_id, indoor_flag and max_range.
    """
    rgb: np.ndarray
    depth: DepthMap
    intrinsics: CameraIntrinsics
    meta: dict = field(default_factory=dict)

    @property
    def max_range(self):
        return self.meta.get('max_range')


def _require(path):
    if not os.path.isfile(path):
        raise MissingFileError("File not found: %s" % path, path)


def read_color(path):
    """Read 8-bit color image as RGB (H, W, 3)."""
    _require(path)
    image = cv2.imread(path, cv2.IMREAD_COLOR)
    if image is None:
        raise UnreadableRasterError("Could not decode image %s" % path, path)
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def read_intrinsics(source):
    """Return sidecar dict from a JSON path or a dict.

    Raises MissingIntrinsicsError when fx or fy are absent.
    """
    path = None
    if isinstance(source, dict):
        data = dict(source)
    else:
        path = source
        if not os.path.isfile(path):
            raise MissingIntrinsicsError("Intrinsics not found: %s" % path, path)
        try:
            with open(path) as fh:
                data = json.load(fh)
        except ValueError as e:
            raise MissingIntrinsicsError(
                "Could not parse intrinsics %s: %s" % (path, e), path
            )
    missing = [key for key in ('fx', 'fy') if data.get(key) is None]
    if missing:
        raise MissingIntrinsicsError(
            "Intrinsics lack %s" % ", ".join(missing), path
        )
    return data


def read_depth_raster(path, depth_scale=DEFAULT_DEPTH_SCALE, max_range=None):
    """Read 16-bit depth raster as DepthMap in meters; zeros are invalid."""
    _require(path)
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise UnreadableRasterError("Could not decode depth %s" % path, path)
    if raw.dtype != np.uint16 or raw.ndim != 2:
        raise UnreadableRasterError(
            "Depth raster %s is not single channel 16-bit (%s, %s)"
            % (path, raw.dtype, raw.shape), path
        )
    depth = raw.astype(np.float64) * float(depth_scale)
    depth = depth.astype(np.float32)
    valid = raw > 0
    if max_range is not None:
        valid &= depth <= max_range
    depth[~valid] = 0.0
    return DepthMap(depth, valid)


def load_rgbd_sample(image_path, depth_path, intrinsics_source, dataset_id=None,
                     frame_id=None):
    """Load a registered RGB-D pair.

    :param str image_path: Color image path
    :param str depth_path: 16-bit depth raster path
    :param str|dict intrinsics_source: Sidecar JSON path or dict
    :param str dataset_id: Dataset name for meta
    :param str frame_id: Frame name for meta, defaults to file stem
    """
    rgb = read_color(image_path)
    sidecar = read_intrinsics(intrinsics_source)
    max_range = sidecar.get('max_range')
    depth = read_depth_raster(
        depth_path, sidecar.get('depth_scale', DEFAULT_DEPTH_SCALE), max_range
    )
    if depth.depth.shape != rgb.shape[:2]:
        raise RegistrationError(
            "Color %s and depth %s are not registered"
            % (rgb.shape[:2], depth.depth.shape), depth_path
        )
    height, width = rgb.shape[:2]
    if frame_id is None:
        frame_id = os.path.splitext(os.path.basename(image_path))[0]
    meta = {
        'dataset_id': dataset_id,
        'frame_id': frame_id,
        'indoor_flag': bool(sidecar.get('indoor_flag', False)),
        'max_range': None if max_range is None else float(max_range)
    }
    return DepthSample(rgb, depth, CameraIntrinsics.from_dict(sidecar, width, height), meta)


def depth_scale_for(max_depth):
    """Meters per raster unit: 1 mm unless max_depth needs coarser units."""
    return max(DEFAULT_DEPTH_SCALE, float(max_depth) / UINT16_MAX)


def write_depth_raster(path, depth, scale=None, sidecar_path=None,
                       sidecar=None):
    """Write DepthMap as 16-bit raster, invalid pixels as 0.

    Without an explicit scale it is derived from the deepest valid pixel;
    rasters with a non-default scale need the sidecar to be read back.

    :param str path: Output PNG path
    :param DepthMap depth: Depth in meters
    :param float scale: Meters per raster unit
    :param str sidecar_path: Optional JSON sidecar path
    :param dict sidecar: Additional sidecar values
    """
    values = np.asarray(depth.depth, dtype=np.float64)
    valid = np.asarray(depth.valid, dtype=bool)
    max_depth = float(values[valid].max()) if valid.any() else 0.0
    if scale is None:
        scale = depth_scale_for(max_depth)
    elif np.round(max_depth / scale) > UINT16_MAX:
        raise ContractError(
            "Depth %.3f m exceeds the 16-bit range at scale %g" % (max_depth, scale)
        )
    units = np.clip(np.round(values / scale), 1, UINT16_MAX)
    raster = np.where(valid, units, 0).astype(np.uint16)
    if not cv2.imwrite(path, raster):
        raise UnreadableRasterError("Could not write depth raster %s" % path, path)
    if sidecar_path is not None:
        data = dict(sidecar or {})
        data['depth_scale'] = scale
        with open(sidecar_path, 'w') as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
    return raster


def write_rgbd_sample(root, frame_id, sample, scale=None):
    """Store a DepthSample in the dataset directory layout."""
    for sub in ('rgb', 'depth', 'intrinsics'):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    cv2.imwrite(
        os.path.join(root, 'rgb', frame_id + '.png'),
        cv2.cvtColor(sample.rgb, cv2.COLOR_RGB2BGR)
    )
    intr = sample.intrinsics
    sidecar = {
        'fx': intr.fx, 'fy': intr.fy, 'cx': intr.cx, 'cy': intr.cy,
        'max_range': sample.meta.get('max_range'),
        'indoor_flag': bool(sample.meta.get('indoor_flag', False))
    }
    write_depth_raster(
        os.path.join(root, 'depth', frame_id + '.png'), sample.depth, scale,
        os.path.join(root, 'intrinsics', frame_id + '.json'), sidecar
    )


class RgbdDirectory:
    """Dataset directory in the rgb/depth/intrinsics layout."""

    def __init__(self, root, logger=None):
        """Constructor

        :param str root: Dataset root directory
        :param Logger logger: Application logger
        """
        if not os.path.isdir(os.path.join(root, 'rgb')):
            raise MissingFileError("No rgb/ directory in %s" % root, root)
        self.root = root
        self.logger = logger
        self.dataset_id = os.path.basename(os.path.normpath(root))
        self.frame_ids = sorted(
            os.path.splitext(name)[0]
            for name in os.listdir(os.path.join(root, 'rgb'))
            if name.endswith('.png')
        )
        if logger is not None:
            logger.debug(
                "Dataset %s: %d frames" % (self.dataset_id, len(self.frame_ids))
            )

    def __len__(self):
        return len(self.frame_ids)

    def __getitem__(self, index):
        frame_id = self.frame_ids[index]
        return load_rgbd_sample(
            os.path.join(self.root, 'rgb', frame_id + '.png'),
            os.path.join(self.root, 'depth', frame_id + '.png'),
            os.path.join(self.root, 'intrinsics', frame_id + '.json'),
            dataset_id=self.dataset_id, frame_id=frame_id
        )

    def __iter__(self):
        for index in range(len(self)):
            yield self[index]


def hflip_sample(sample):
    """Mirror color, depth and principal point horizontally."""
    depth = DepthMap(
        np.ascontiguousarray(sample.depth.depth[:, ::-1]),
        np.ascontiguousarray(sample.depth.valid[:, ::-1])
    )
    return replace(
        sample,
        rgb=np.ascontiguousarray(sample.rgb[:, ::-1]),
        depth=depth,
        intrinsics=sample.intrinsics.hflip(),
        meta=dict(sample.meta)
    )


def augment(sample, seed):
    """Seeded horizontal flip (p=0.5) plus brightness and contrast jitter.

    Depth values are never changed and no geometric scaling is applied.

    :param DepthSample sample: Training sample
    :param int seed: Augmentation seed
    """
    rng = np.random.default_rng(seed)
    flip = rng.random() < 0.5
    brightness = rng.uniform(1 - JITTER, 1 + JITTER)
    contrast = rng.uniform(1 - JITTER, 1 + JITTER)

    if flip:
        sample = hflip_sample(sample)
    rgb = sample.rgb.astype(np.float32)
    mean = rgb.mean()
    rgb = ((rgb - mean) * contrast + mean) * brightness
    rgb = np.clip(np.round(rgb), 0, 255).astype(np.uint8)
    return replace(sample, rgb=rgb, meta=dict(sample.meta))
