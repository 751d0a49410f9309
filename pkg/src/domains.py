"""Range domains: partition of the global depth range into K nested
intervals, ground truth domain labels and fusion of per-domain bins.
"""
from dataclasses import dataclass

import numpy as np
import torch

from bincore import FUSED, BinCenterVector, as_tensor
from errors import ContractError

SPACE_INCREASING = 'space_increasing'
UNIFORM = 'uniform'

# percentile of valid depths deciding the domain label
LABEL_PERCENTILE = 0.99


@dataclass(frozen=True)
class RangeDomainSet:
    """K range domains RD_k = [z_min, uppers[k]] (nested intervals)."""
    z_min: float
    z_max: float
    k_count: int
    uppers: tuple

    def interval(self, k):
        """Return interval of 1-based domain k."""
        return (self.z_min, self.uppers[k - 1])

    def bucket(self, k):
        """Return disjoint slab (lower, upper] of 1-based domain k."""
        lower = self.z_min if k == 1 else self.uppers[k - 2]
        return (lower, self.uppers[k - 1])

    def as_dict(self):
        return {
            'z_min': self.z_min,
            'z_max': self.z_max,
            'k_count': self.k_count,
            'uppers': list(self.uppers)
        }


@dataclass
class DomainProbability:
    """Per-image RD probabilities y (B, K) and the logits they came from."""
    probs: torch.Tensor
    logits: torch.Tensor = None


@dataclass
class BinBank:
    """Per-domain bin centers (B, K, N)."""
    centers: torch.Tensor
    kind: str

    @property
    def k_count(self):
        return self.centers.shape[-2]

    def domain(self, k):
        """Return BinCenterVector of 1-based domain k."""
        return BinCenterVector(self.centers[..., k - 1, :], self.kind)


def _check_range(z_min, z_max, k_count):
    if int(k_count) != k_count or k_count < 1:
        raise ContractError("Number of range domains must be >= 1, got %s" % k_count)
    if not z_max > z_min:
        raise ContractError("z_max (%s) must exceed z_min (%s)" % (z_max, z_min))


def partition_range(z_min, z_max, k_count):
    """Space-increasing partition.

    uppers[k] = z_min + sum_{i=1..k} 2 i (z_max - z_min) / (K (1 + K))

    :param float z_min: Global minimum depth
    :param float z_max: Global maximum depth
    :param int k_count: Number of range domains K
    """
    _check_range(z_min, z_max, k_count)
    span = float(z_max) - float(z_min)
    denominator = k_count * (1 + k_count)
    # integer partial sums i(i+1) keep the result exact for integral ranges
    uppers = [
        float(z_min) + span * (k * (k + 1)) / denominator
        for k in range(1, k_count + 1)
    ]
    uppers[-1] = float(z_max)
    return RangeDomainSet(float(z_min), float(z_max), int(k_count), tuple(uppers))


def uniform_partition(z_min, z_max, k_count):
    """Equal-width partition, uppers[k] = z_min + k (z_max - z_min) / K."""
    _check_range(z_min, z_max, k_count)
    span = float(z_max) - float(z_min)
    uppers = [float(z_min) + span * k / k_count for k in range(1, k_count + 1)]
    uppers[-1] = float(z_max)
    return RangeDomainSet(float(z_min), float(z_max), int(k_count), tuple(uppers))


def make_partition(strategy, z_min, z_max, k_count):
    """Return partition for strategy 'space_increasing' or 'uniform'."""
    if strategy == SPACE_INCREASING:
        return partition_range(z_min, z_max, k_count)
    elif strategy == UNIFORM:
        return uniform_partition(z_min, z_max, k_count)
    raise ContractError("Unknown partition strategy '%s'" % strategy)


def label_for_depth(rds, depth):
    """Return smallest 1-based k with uppers[k] >= depth, clamped to K."""
    k = int(np.searchsorted(np.asarray(rds.uppers), depth, side='left')) + 1
    return min(k, rds.k_count)


def rd_label(gt, rds, percentile=LABEL_PERCENTILE):
    """Range domain label of a ground truth depth map.

    :param DepthMap gt: Ground truth
    :param RangeDomainSet rds: Range domains
    :param float percentile: Fraction in (0, 1] of the depth percentile
    """
    if not 0 < percentile <= 1:
        raise ContractError("Percentile must be in (0, 1], got %s" % percentile)
    depths = gt.depth[gt.valid]
    if isinstance(depths, torch.Tensor):
        depths = depths.detach().cpu().numpy()
    if depths.size == 0:
        raise ContractError("Ground truth has no valid pixels")
    return label_for_depth(rds, float(np.quantile(depths, percentile)))


def rd_labels(gt, rds, percentile=LABEL_PERCENTILE):
    """Labels of a batched depth map (B, H, W) as LongTensor (B,)."""
    labels = [
        rd_label(type(gt)(gt.depth[i], gt.valid[i]), rds, percentile)
        for i in range(gt.depth.shape[0])
    ]
    return torch.as_tensor(labels, dtype=torch.long)


def fuse_bins(bank, y):
    """Weighted fusion c = sum_k c^[k] y_k.

    :param BinBank bank: Per-domain centers (..., K, N)
    :param DomainProbability|Tensor y: RD probabilities (..., K)
    """
    probs = y.probs if isinstance(y, DomainProbability) else as_tensor(y)
    centers = bank.centers if isinstance(bank, BinBank) else as_tensor(bank)
    if probs.shape[-1] != centers.shape[-2]:
        raise ContractError(
            "Bin bank has %d domains, probabilities %d"
            % (centers.shape[-2], probs.shape[-1])
        )
    fused = (centers * probs.to(centers.dtype).unsqueeze(-1)).sum(dim=-2)
    return BinCenterVector(fused, FUSED)


def select_bins(bank, y):
    """Select the bins of the top-scoring domain (no weighted fusion)."""
    probs = y.probs if isinstance(y, DomainProbability) else as_tensor(y)
    centers = bank.centers if isinstance(bank, BinBank) else as_tensor(bank)
    if probs.shape[-1] != centers.shape[-2]:
        raise ContractError("Bin bank and probabilities disagree on K")
    index = probs.argmax(dim=-1)
    one_hot = torch.nn.functional.one_hot(index, centers.shape[-2]).to(centers.dtype)
    selected = (centers * one_hot.unsqueeze(-1)).sum(dim=-2)
    return BinCenterVector(selected, FUSED)
