"""Training losses.

Pixel supervision is a scale-invariant log loss applied at every decoder
stage; the bin centers are pulled towards the ground truth depth set by the
bi-directional Chamfer loss and the domain query is supervised by cross
entropy against the ground truth range domain.
"""
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from bincore import (
    CHAMFER_SUBSAMPLE_CAP, EPSILON, SUM, DepthMap, batch_chamfer_bin_loss
)
from errors import ContractError

SILOG_ALPHA = 10.0
SILOG_LAMBDA = 0.85

# decoder stage weights, geometric in resolution
STAGE_WEIGHTS = (1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0)

# logits are clipped to keep cross entropy finite
LOGIT_CLIP = 50.0


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 1.0
    chamfer: float = 0.1
    ce: float = 0.1


@dataclass
class LossBreakdown:
    pixel: torch.Tensor
    chamfer: torch.Tensor
    domain_ce: torch.Tensor
    total: torch.Tensor
    weights: LossWeights

    def as_dict(self):
        return {
            'pixel': float(self.pixel),
            'chamfer': float(self.chamfer),
            'domain_ce': float(self.domain_ce),
            'total': float(self.total)
        }


def _batched(depth_map):
    if depth_map.depth.dim() == 2:
        return DepthMap(depth_map.depth.unsqueeze(0), depth_map.valid.unsqueeze(0))
    return depth_map


def pixel_depth_loss(pred, gt, alpha=SILOG_ALPHA, lam=SILOG_LAMBDA):
    """Scale-invariant log loss over jointly valid pixels.

    With g = ln(pred) - ln(gt): alpha * sqrt(mean(g^2) - lam * mean(g)^2),
    computed per image and averaged over images with valid pixels.

    :param DepthMap pred: Prediction (B, H, W) or (H, W)
    :param DepthMap gt: Ground truth registered with pred
    :param float alpha: Output scale
    :param float lam: Variance weight
    """
    pred, gt = _batched(pred), _batched(gt)
    if pred.depth.shape != gt.depth.shape:
        raise ContractError(
            "Prediction %s and ground truth %s are not registered"
            % (tuple(pred.depth.shape), tuple(gt.depth.shape))
        )
    valid = gt.valid & pred.valid
    losses = []
    for i in range(pred.depth.shape[0]):
        mask = valid[i]
        if not bool(mask.any()):
            continue
        g = torch.log(pred.depth[i][mask].clamp_min(EPSILON)) - torch.log(gt.depth[i][mask])
        variance = (g ** 2).mean() - lam * g.mean() ** 2
        losses.append(alpha * torch.sqrt(variance.clamp_min(0.0) + 1e-12))
    if not losses:
        raise ContractError("No jointly valid pixels for pixel loss")
    return torch.stack(losses).mean()


def downsample_gt(gt, size):
    """Nearest neighbour, validity aware downsampling of ground truth.

    :param DepthMap gt: Ground truth (B, H, W)
    :param tuple size: Target (h, w)
    """
    depth = F.interpolate(gt.depth.unsqueeze(1), size=tuple(size), mode='nearest')
    valid = F.interpolate(
        gt.valid.unsqueeze(1).to(gt.depth.dtype), size=tuple(size), mode='nearest'
    )
    return DepthMap(depth.squeeze(1), valid.squeeze(1) > 0.5)


def hierarchical_loss(stage_depths, gt, weights=STAGE_WEIGHTS,
                      alpha=SILOG_ALPHA, lam=SILOG_LAMBDA):
    """Weighted sum of pixel losses of all decoder stages.

    Stages that are None (no bins applied) or without valid downsampled
    ground truth are skipped.

    :param list stage_depths: D'_1 .. D'_5 tensors (B, h_s, w_s) or None
    :param DepthMap gt: Ground truth at input resolution (B, H, W)
    :param tuple weights: Stage weights w_1 .. w_5
    """
    gt = _batched(gt)
    total = None
    for depth, weight in zip(stage_depths, weights):
        if depth is None or weight == 0:
            continue
        stage_gt = downsample_gt(gt, depth.shape[-2:])
        if not bool(stage_gt.valid.any()):
            continue
        pred = DepthMap(depth, torch.ones_like(depth, dtype=torch.bool))
        term = weight * pixel_depth_loss(pred, stage_gt, alpha, lam)
        total = term if total is None else total + term
    if total is None:
        raise ContractError("No decoder stage has valid ground truth")
    return total


def rd_classification_loss(y, labels):
    """Cross entropy -ln(y_label) from logits.

    :param DomainProbability y: RD probabilities with logits (B, K)
    :param Tensor labels: 1-based labels (B,)
    """
    labels = torch.as_tensor(labels, device=y.probs.device).reshape(-1)
    k_count = y.probs.shape[-1]
    if bool(((labels < 1) | (labels > k_count)).any()):
        raise ContractError("RD labels must lie in [1, %d]" % k_count)
    logits = y.logits
    if logits is None:
        logits = torch.log(y.probs.clamp_min(1e-12))
    logits = logits.reshape(-1, k_count).clamp(-LOGIT_CLIP, LOGIT_CLIP)
    return F.cross_entropy(logits, labels.long() - 1)


def total_loss(bundle, gt, labels, weights=LossWeights(),
               alpha=SILOG_ALPHA, lam=SILOG_LAMBDA,
               chamfer_cap=CHAMFER_SUBSAMPLE_CAP, chamfer_reduction=SUM, seed=0):
    """Combine hierarchical pixel loss, Chamfer loss on the fused centers
    and RD cross entropy.

    The cross entropy term is zero when the bundle carries no domain logits
    (domain-aware estimation disabled).

    :param PredictionBundle bundle: Network output
    :param DepthMap gt: Ground truth (B, H, W)
    :param Tensor labels: 1-based RD labels (B,)
    :param LossWeights weights: Term weights
    """
    gt = _batched(gt)
    pixel = hierarchical_loss(bundle.stage_depths, gt, alpha=alpha, lam=lam)
    chamfer = batch_chamfer_bin_loss(
        bundle.fused_centers, gt, chamfer_cap, seed, chamfer_reduction
    )
    if bundle.domain_probs.logits is not None:
        domain_ce = rd_classification_loss(bundle.domain_probs, labels)
    else:
        domain_ce = torch.zeros((), dtype=pixel.dtype, device=pixel.device)

    total = weights.pixel * pixel + weights.chamfer * chamfer + weights.ce * domain_ce
    return LossBreakdown(pixel, chamfer, domain_ce, total, weights)
