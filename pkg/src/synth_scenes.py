"""Deterministic procedural RGB-D scenes.

A scene is a far wall at depth t covering the top rows, a floor ramp from t
towards the camera and seeded boxes and ellipsoids standing on the floor.
t is drawn inside the bucket of the requested range domain and the wall
covers more than 1% of the valid pixels, so the 99th depth percentile of a
scene is t and its domain label is known by construction. Color encodes
log depth as hue, modulated in value by a seeded texture field.
"""
import hashlib
import math
from dataclasses import dataclass, replace

import cv2
import numpy as np

from bincore import DepthMap
from domains import make_partition, rd_label, SPACE_INCREASING
from errors import ContractError
from fov_alignment import DEFAULT_FOV_DEG, CameraIntrinsics
from rgbd_samples import DepthSample

MIXED = 'mixed'

# fraction of the bucket kept free at both ends
BUCKET_MARGIN = 0.05
# floor depth at the bottom row relative to the wall
FLOOR_NEAR = 0.4
# shapes lie between these fractions of the wall depth
SHAPE_DEPTH = (0.3, 0.9)
# hue span used by the log depth ramp (red near, blue far)
HUE_SPAN = 240.0
SATURATION = 0.8
SKY_HSV = (200.0, 0.25, 1.0)


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings; image_size is (h, w)."""
    seed: int = 0
    rd_index: object = MIXED
    shape_count: tuple = (1, 4)
    range_set: object = None
    texture_freq: float = 6.0
    image_size: tuple = (240, 320)
    fx_jitter: float = 0.05
    fov_deg: tuple = DEFAULT_FOV_DEG
    sky: bool = True
    indoor: object = None
    indoor_max_depth: float = 10.0

    def domains(self):
        if self.range_set is None:
            return make_partition(SPACE_INCREASING, 0.0, 80.0, 4)
        return self.range_set


@dataclass
class SynthDataset:
    """Seeded sample specs split into train and test.

    Samples are generated on access from (seed, rd_index).
    """
    template: SynthConfig
    train_specs: list
    test_specs: list

    def config(self, spec):
        seed, rd_index = spec
        return replace(self.template, seed=int(seed), rd_index=int(rd_index))

    def sample(self, spec):
        return synth_scene(self.config(spec))

    @property
    def train(self):
        return _SpecSequence(self, self.train_specs)

    @property
    def test(self):
        return _SpecSequence(self, self.test_specs)


class _SpecSequence:
    def __init__(self, dataset, specs):
        self.dataset = dataset
        self.specs = specs

    def __len__(self):
        return len(self.specs)

    def __getitem__(self, index):
        return self.dataset.sample(self.specs[index])

    def __iter__(self):
        for spec in self.specs:
            yield self.dataset.sample(spec)

    def labels(self):
        return [rd_index for _, rd_index in self.specs]


def _wall_depth(rng, rds, k):
    lower, upper = rds.bucket(k)
    span = upper - lower
    return rng.uniform(lower + BUCKET_MARGIN * span, upper - BUCKET_MARGIN * span)


def _texture(rng, height, width, freq):
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    x /= width
    y /= height
    field = np.zeros((height, width))
    for _ in range(2):
        angle = rng.uniform(0, math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        f = freq * rng.uniform(0.7, 1.3)
        field += np.sin(2 * math.pi * f * (x * math.cos(angle) + y * math.sin(angle)) + phase)
    return 0.5 + 0.25 * field


def depth_to_hue(depth, z_min, z_max):
    """Hue in degrees of a depth in meters (log ramp, near is red)."""
    near = max(z_min, 0.05)
    t = (np.log(np.clip(depth, near, z_max)) - math.log(near)) / (math.log(z_max) - math.log(near))
    return HUE_SPAN * t


def _render(depth, valid, rng, cfg, rds):
    height, width = depth.shape
    texture = _texture(rng, height, width, cfg.texture_freq)
    hsv = np.empty((height, width, 3), dtype=np.float32)
    hsv[..., 0] = depth_to_hue(np.where(valid, depth, rds.z_max), rds.z_min, rds.z_max)
    hsv[..., 1] = SATURATION
    hsv[..., 2] = 0.55 + 0.45 * texture
    hsv[~valid] = SKY_HSV
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def _place_shapes(depth, rng, cfg, wall, top):
    height, width = depth.shape
    if height - top < 4:
        return
    count = int(rng.integers(cfg.shape_count[0], cfg.shape_count[1] + 1))
    y, x = np.mgrid[0:height, 0:width]
    for _ in range(count):
        h = int(rng.integers(max(2, (height - top) // 6), max(3, height - top)))
        w = int(rng.integers(max(2, width // 10), max(3, width // 3)))
        y0 = int(rng.integers(top, max(top + 1, height - h + 1)))
        x0 = int(rng.integers(0, max(1, width - w + 1)))
        d = wall * rng.uniform(*SHAPE_DEPTH)
        if rng.random() < 0.5:
            region = (slice(y0, y0 + h), slice(x0, x0 + w))
            depth[region] = np.minimum(depth[region], d)
        else:
            cy, cx = y0 + h / 2.0, x0 + w / 2.0
            r2 = ((y - cy) / (h / 2.0)) ** 2 + ((x - cx) / (w / 2.0)) ** 2
            inside = r2 < 1.0
            bulge = d - 0.1 * d * np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
            depth[inside] = np.minimum(depth[inside], bulge[inside])


def synth_scene(cfg):
    """Generate one DepthSample.

    :param SynthConfig cfg: Generator config
    """
    rds = cfg.domains()
    rng = np.random.default_rng(cfg.seed)
    k = cfg.rd_index
    if k == MIXED:
        k = int(rng.integers(1, rds.k_count + 1))
    elif isinstance(k, bool) or int(k) != k or not 1 <= int(k) <= rds.k_count:
        raise ContractError(
            "rd_index must be in [1, %d] or 'mixed', got %s" % (rds.k_count, k)
        )
    k = int(k)
    height, width = (int(s) for s in cfg.image_size)
    if height < 8 or width < 8:
        raise ContractError("Synthetic images need at least 8x8 pixels")

    wall = _wall_depth(rng, rds, k)
    indoor = cfg.indoor
    if indoor is None:
        indoor = rds.bucket(k)[1] <= cfg.indoor_max_depth

    sky_rows = 0
    if cfg.sky and not indoor:
        sky_rows = int(height * rng.uniform(0.0, 0.1))
    wall_rows = max(1, int(height * rng.uniform(0.2, 0.4)))
    top = sky_rows + wall_rows

    depth = np.full((height, width), wall, dtype=np.float64)
    floor_rows = height - top
    if floor_rows > 0:
        ramp = np.linspace(1.0, FLOOR_NEAR, floor_rows + 1)[1:]
        depth[top:] = (wall * ramp)[:, None]
    _place_shapes(depth, rng, cfg, wall, top)

    valid = np.ones((height, width), dtype=bool)
    valid[:sky_rows] = False
    depth[~valid] = 0.0
    depth = depth.astype(np.float32)

    rgb = _render(depth, valid, rng, cfg, rds)

    fov_x, fov_y = (math.radians(v) for v in cfg.fov_deg)
    jitter = 1.0 + rng.uniform(-cfg.fx_jitter, cfg.fx_jitter)
    intr = CameraIntrinsics(
        fx=width / (2 * math.tan(fov_x / 2)) * jitter,
        fy=height / (2 * math.tan(fov_y / 2)) * jitter,
        width=width, height=height
    )
    meta = {
        'dataset_id': 'synth',
        'frame_id': 'synth-%d' % cfg.seed,
        'indoor_flag': bool(indoor),
        'max_range': float(rds.z_max),
        'rd_index': k
    }
    return DepthSample(rgb, DepthMap(depth, valid), intr, meta)


def _check_mix(rd_mix, k_count):
    if rd_mix is None:
        return np.full(k_count, 1.0 / k_count)
    mix = np.asarray(rd_mix, dtype=np.float64)
    if mix.shape != (k_count,):
        raise ContractError("rd_mix needs %d entries, got %s" % (k_count, mix.shape))
    if (mix < 0).any() or not np.isfinite(mix).all() or abs(mix.sum() - 1.0) > 1e-6:
        raise ContractError("rd_mix must be a probability simplex: %s" % mix.tolist())
    return mix


def rd_counts(mix, count):
    """Split count by mix with the largest remainder method."""
    exact = mix * count
    counts = np.floor(exact).astype(int)
    remainder = count - counts.sum()
    order = np.argsort(-(exact - counts), kind='stable')
    counts[order[:remainder]] += 1
    return counts


def _seed_hash(seed):
    return int(hashlib.sha256(str(int(seed)).encode()).hexdigest(), 16)


def make_dataset(template, count, rd_mix=None, test_fraction=0.1):
    """Seeded dataset of count samples split into train and test.

    Per-domain counts follow rd_mix (uniform by default); the test split
    holds the samples with the smallest seed hashes.

    :param SynthConfig template: Config template, its seed seeds the set
    :param int count: Number of samples
    :param list rd_mix: Probability of every range domain
    :param float test_fraction: Share of test samples
    """
    if count < 1:
        raise ContractError("count must be >= 1")
    if not 0 <= test_fraction < 1:
        raise ContractError("test_fraction must be in [0, 1)")
    rds = template.domains()
    mix = _check_mix(rd_mix, rds.k_count)

    rng = np.random.default_rng(template.seed)
    labels = np.repeat(np.arange(1, rds.k_count + 1), rd_counts(mix, count))
    rng.shuffle(labels)
    seeds = rng.choice(2 ** 31 - 1, size=count, replace=False)
    specs = [(int(s), int(k)) for s, k in zip(seeds, labels)]

    n_test = int(round(count * test_fraction))
    ranked = sorted(range(count), key=lambda i: _seed_hash(specs[i][0]))
    test_ids = set(ranked[:n_test])
    train = [spec for i, spec in enumerate(specs) if i not in test_ids]
    test = [spec for i, spec in enumerate(specs) if i in test_ids]
    return SynthDataset(template, train, test)


def make_sequence(template, length, outdoor_fraction=1 / 3):
    """Ordered indoor -> outdoor -> indoor frame walk.

    Indoor frames come from the first range domain, outdoor frames from the
    last.

    :param SynthConfig template: Config template
    :param int length: Number of frames
    :param float outdoor_fraction: Share of the middle outdoor segment
    """
    if length < 1:
        raise ContractError("length must be >= 1")
    rds = template.domains()
    n_outdoor = int(round(length * outdoor_fraction))
    start = (length - n_outdoor) // 2
    frames = []
    for i in range(length):
        outdoor = start <= i < start + n_outdoor
        cfg = replace(
            template, seed=template.seed + i,
            rd_index=rds.k_count if outdoor else 1,
            indoor=not outdoor
        )
        sample = synth_scene(cfg)
        sample.meta['frame_id'] = 'frame-%05d' % i
        frames.append(sample)
    return frames


def label_agreement(template, seeds):
    """Share of scenes whose ground truth label equals the requested one."""
    rds = template.domains()
    hits = 0
    for seed in seeds:
        sample = synth_scene(replace(template, seed=int(seed)))
        hits += rd_label(sample.depth, rds) == sample.meta['rd_index']
    return hits / float(len(seeds))
