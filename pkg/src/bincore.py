"""Depth bin arithmetic.

Width-based bins (normalized widths accumulated over a fixed depth interval),
variation-based bins (unnormalized, sign-free per-bin variations accumulated
from epsilon), probability-weighted depth synthesis, the bi-directional
Chamfer bin loss and the occupancy analyses used to inspect bin ambiguity.

Tensors are channel-first: probability volumes have shape (..., N, H, W),
bin centers (..., N) and depth maps (..., H, W).
"""
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats

from errors import ContractError

# smoothing term shared by width normalization and variation accumulation
EPSILON = 1e-3

# Chamfer cap on ground-truth points per image
CHAMFER_SUBSAMPLE_CAP = 10000

WIDTH_BASED = 'width_based'
VARIATION_BASED = 'variation_based'
FUSED = 'fused'

# Chamfer reductions over points
SUM = 'sum'
MEAN = 'mean'


def as_tensor(values, dtype=torch.float64):
    """Return values as tensor, keeping tensors untouched.

    :param list|ndarray|Tensor values: Input values
    :param dtype dtype: Tensor dtype for non-tensor input
    """
    if isinstance(values, torch.Tensor):
        return values
    return torch.as_tensor(np.asarray(values), dtype=dtype)


@dataclass
class BinWidthVector:
    """Raw (b') and normalized (b) bin widths."""
    raw_widths: torch.Tensor
    normalized: torch.Tensor


@dataclass
class BinCenterVector:
    """Metric bin centers of kind width_based, variation_based or fused."""
    centers: torch.Tensor
    kind: str

    @property
    def n_bins(self):
        return self.centers.shape[-1]


@dataclass
class DepthMap:
    """Metric depth with validity mask.

    Works with numpy arrays as well as torch tensors; invalid pixels
    (zero depth, sky, padding, out of range) never enter losses or metrics.
    """
    depth: object
    valid: object

    @classmethod
    def from_depth(cls, depth, max_range=None):
        """Create depth map marking zeros, non-finite values and depths
        beyond max_range as invalid.

        :param ndarray|Tensor depth: Depth in meters
        :param float max_range: Optional upper bound of valid depths
        """
        if isinstance(depth, torch.Tensor):
            valid = torch.isfinite(depth) & (depth > 0)
        else:
            valid = np.isfinite(depth) & (depth > 0)
        if max_range is not None:
            valid = valid & (depth <= max_range)
        return cls(depth, valid)

    @property
    def shape(self):
        return tuple(self.depth.shape)

    def valid_depths(self):
        """Return flat vector of valid depths."""
        return self.depth[self.valid]


def normalize_widths(raw, epsilon=EPSILON):
    """Normalize raw bin widths: b_n = (b'_n + eps) / sum_i (b'_i + eps).

    :param Tensor raw: Non-negative raw widths (..., N)
    :param float epsilon: Positive smoothing term
    """
    raw = as_tensor(raw)
    if raw.dim() == 0 or raw.shape[-1] == 0:
        raise ContractError("Width vector is empty")
    if epsilon <= 0:
        raise ContractError("Epsilon must be positive, got %s" % epsilon)
    if bool((raw < 0).any()):
        raise ContractError("Raw bin widths must be non-negative")

    smoothed = raw + epsilon
    return BinWidthVector(raw, smoothed / smoothed.sum(dim=-1, keepdim=True))


def width_bin_centers(widths, d_min, d_max):
    """Accumulate normalized widths into centers inside [d_min, d_max].

    center_n = d_min + (d_max - d_min) * (b_n / 2 + sum_{j<n} b_j)

    :param BinWidthVector|Tensor widths: Normalized widths (..., N)
    :param float|Tensor d_min: Lower bound, broadcastable to (...)
    :param float|Tensor d_max: Upper bound, broadcastable to (...)
    """
    b = widths.normalized if isinstance(widths, BinWidthVector) else as_tensor(widths)
    d_min = torch.as_tensor(d_min, dtype=b.dtype, device=b.device)
    d_max = torch.as_tensor(d_max, dtype=b.dtype, device=b.device)
    if bool((d_max <= d_min).any()):
        raise ContractError("d_max must exceed d_min")

    left_edges = torch.cumsum(b, dim=-1) - b
    span = (d_max - d_min).unsqueeze(-1) if d_max.dim() > 0 else d_max - d_min
    lower = d_min.unsqueeze(-1) if d_min.dim() > 0 else d_min
    centers = lower + span * (left_edges + b / 2)
    return BinCenterVector(centers, WIDTH_BASED)


def variation_bin_centers(variations, epsilon=EPSILON):
    """Accumulate signed bin variations into unnormalized centers.

    center_n = eps + v_n / 2 + sum_{j<n} v_j

    Centers are not bounded by any depth range, need not be monotone and may
    be negative.

    :param Tensor variations: Per-bin variations (..., N) in meters
    :param float epsilon: Start offset
    """
    v = as_tensor(variations)
    if v.dim() == 0 or v.shape[-1] == 0:
        raise ContractError("Variation vector is empty")
    if not bool(torch.isfinite(v).all()):
        raise ContractError("Bin variations contain NaN or Inf")

    centers = epsilon + torch.cumsum(v, dim=-1) - v / 2
    return BinCenterVector(centers, VARIATION_BASED)


def combine_depth(probs, centers):
    """Synthesize depth D(i) = sum_n c_n P_n(i).

    :param Tensor probs: Probability volume (..., N, H, W)
    :param BinCenterVector|Tensor centers: Bin centers (..., N)
    """
    c = centers.centers if isinstance(centers, BinCenterVector) else as_tensor(centers)
    if probs.dim() < 3 or probs.shape[-3] != c.shape[-1]:
        raise ContractError(
            "Probability channels %s do not match %d bins"
            % (tuple(probs.shape), c.shape[-1])
        )
    depth = (probs * c.to(probs.dtype)[..., :, None, None]).sum(dim=-3)
    return DepthMap(depth, torch.ones_like(depth, dtype=torch.bool))


def chamfer_bin_loss(centers, gt_depths, subsample_cap=CHAMFER_SUBSAMPLE_CAP, seed=0,
                     reduction=SUM):
    """Bi-directional Chamfer loss between bin centers and depth values.

    sum_d min_n |d - c_n|^2 + sum_n min_d |d - c_n|^2

    With reduction "mean" both directions are averaged instead of summed.

    :param BinCenterVector|Tensor centers: Bin centers (N,)
    :param Tensor gt_depths: Valid ground truth depths (any shape)
    :param int subsample_cap: Maximum number of depths used
    :param int seed: Seed of the uniform subsample
    """
    c = centers.centers if isinstance(centers, BinCenterVector) else as_tensor(centers)
    c = c.reshape(-1)
    d = as_tensor(gt_depths).reshape(-1).to(device=c.device, dtype=c.dtype)
    if d.numel() == 0:
        raise ContractError("Chamfer loss needs at least one ground truth depth")

    if d.numel() > subsample_cap:
        generator = torch.Generator().manual_seed(seed)
        index = torch.randperm(d.numel(), generator=generator)[:subsample_cap]
        d = d[index.to(d.device)]

    if reduction not in (SUM, MEAN):
        raise ContractError("Unknown Chamfer reduction '%s'" % reduction)
    squared = (d[:, None] - c[None, :]) ** 2
    to_centers = squared.min(dim=1).values
    to_depths = squared.min(dim=0).values
    if reduction == MEAN:
        return to_centers.mean() + to_depths.mean()
    return to_centers.sum() + to_depths.sum()


def batch_chamfer_bin_loss(centers, gt, subsample_cap=CHAMFER_SUBSAMPLE_CAP, seed=0,
                           reduction=SUM):
    """Mean Chamfer loss over a batch.

    :param BinCenterVector|Tensor centers: Bin centers (B, N)
    :param DepthMap gt: Ground truth (B, H, W)
    :param int subsample_cap: Maximum number of depths per image
    :param int seed: Subsample seed (offset by batch index)
    :param str reduction: "sum" or "mean" over points
    """
    c = centers.centers if isinstance(centers, BinCenterVector) else centers
    losses = []
    for i in range(c.shape[0]):
        depths = gt.depth[i][gt.valid[i]]
        if depths.numel() == 0:
            continue
        losses.append(chamfer_bin_loss(c[i], depths, subsample_cap, seed + i, reduction))
    if not losses:
        raise ContractError("No valid ground truth depth in batch")
    return torch.stack(losses).mean()


def peak_bin_index(centers):
    """Return 1-based index of the (first) maximal bin center.

    :param BinCenterVector|Tensor centers: Bin centers (N,) or (B, N)
    """
    c = centers.centers if isinstance(centers, BinCenterVector) else as_tensor(centers)
    if c.dim() == 0 or c.shape[-1] == 0:
        raise ContractError("Bin center vector is empty")
    # torch.argmax returns the first maximal index
    index = torch.argmax(c, dim=-1) + 1
    if c.dim() == 1:
        return int(index)
    return index


def _valid_pixel_probs(probs, gt):
    n_bins = probs.shape[-3]
    pixel_probs = probs.detach().movedim(-3, -1).reshape(-1, n_bins)
    depth = as_tensor(gt.depth).detach().reshape(-1).to(pixel_probs.device)
    valid = as_tensor(gt.valid, dtype=torch.bool).reshape(-1).to(pixel_probs.device)
    if depth.numel() != pixel_probs.shape[0]:
        raise ContractError("Probability volume and ground truth are not registered")
    if not bool(valid.any()):
        raise ContractError("Ground truth has no valid pixels")
    return pixel_probs[valid].double(), depth[valid].double()


def occupancy_counts(probs, gt, depth_buckets, depth_range):
    """Accumulate unnormalized probability mass per (depth bucket, bin).

    Each valid pixel adds its probability vector to the row of the bucket
    holding its ground truth depth.

    :param Tensor probs: Probability volume (..., N, H, W)
    :param DepthMap gt: Ground truth registered with probs
    :param int depth_buckets: Number of equal-width depth buckets
    :param tuple depth_range: (low, high) bucket range in meters
    """
    pixel_probs, depth = _valid_pixel_probs(probs, gt)
    low, high = depth_range
    if high <= low:
        raise ContractError("Invalid bucket range %s" % (depth_range,))

    bucket = torch.floor((depth - low) / (high - low) * depth_buckets).long()
    bucket = bucket.clamp(0, depth_buckets - 1)
    counts = torch.zeros(
        depth_buckets, pixel_probs.shape[1], dtype=torch.float64,
        device=pixel_probs.device
    )
    counts.index_add_(0, bucket, pixel_probs)
    return counts.cpu()


def normalize_rows(counts):
    """Normalize rows to sum 1, leaving empty rows zero."""
    totals = counts.sum(dim=1, keepdim=True)
    return torch.where(totals > 0, counts / totals.clamp_min(1e-300), counts)


def bin_occupancy_histogram(centers, probs, gt, depth_buckets, depth_range=None):
    """Frequency of depth values occurring in each bin.

    :param BinCenterVector|Tensor centers: Bin centers (..., N)
    :param Tensor probs: Probability volume (..., N, H, W)
    :param DepthMap gt: Ground truth
    :param int depth_buckets: Number of depth buckets (matrix rows)
    :param tuple depth_range: Bucket range, defaults to (0, max valid depth)
    """
    c = centers.centers if isinstance(centers, BinCenterVector) else as_tensor(centers)
    if c.shape[-1] != probs.shape[-3]:
        raise ContractError("Bin count of centers and probabilities differ")
    if depth_range is None:
        _, depth = _valid_pixel_probs(probs, gt)
        depth_range = (0.0, max(float(depth.max()), 1e-6))
    return normalize_rows(occupancy_counts(probs, gt, depth_buckets, depth_range))


def bin_depth_statistics(probs, gt):
    """Return per-bin probability mass and mass-weighted depth sum.

    :param Tensor probs: Probability volume (..., N, H, W)
    :param DepthMap gt: Ground truth
    """
    pixel_probs, depth = _valid_pixel_probs(probs, gt)
    mass = pixel_probs.sum(dim=0)
    depth_sum = (pixel_probs * depth[:, None]).sum(dim=0)
    return mass.cpu(), depth_sum.cpu()


def bin_depth_rank_correlation(mass, depth_sum, min_mass=1e-9):
    """Spearman correlation between bin index and the occupancy weighted
    mean depth of each occupied bin.

    :param Tensor mass: Probability mass per bin (N,)
    :param Tensor depth_sum: Mass weighted depth sum per bin (N,)
    :param float min_mass: Bins with less mass count as unoccupied
    """
    mass = as_tensor(mass).double()
    occupied = mass > min_mass
    if int(occupied.sum()) < 2:
        return float('nan')
    mean_depth = (as_tensor(depth_sum).double()[occupied] / mass[occupied]).numpy()
    index = torch.nonzero(occupied).reshape(-1).numpy()
    rho, _ = stats.spearmanr(index, mean_depth)
    return float(rho)
