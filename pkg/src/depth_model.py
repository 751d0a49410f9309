"""Metric depth network.

Strided conv encoder -> pyramid scene transformer carrying K bin queries and
one domain query -> shared bin FFN and RD classification head -> fused bin
centers -> decoder synthesizing a metric depth map from the fused centers at
every resolution stage.
"""
import pickle
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from bincore import (
    EPSILON, VARIATION_BASED, WIDTH_BASED, BinCenterVector, DepthMap,
    combine_depth, normalize_widths, variation_bin_centers, width_bin_centers
)
from domains import (
    SPACE_INCREASING, UNIFORM, BinBank, DomainProbability, fuse_bins,
    make_partition, select_bins
)
from errors import CheckpointError, ContractError
from fov_alignment import align_fov, inverse_align

DECODER_STAGES = 5

SHARED_FFN = 'shared_ffn'
ONE_QUERY_K_FFN = 'one_query_k_ffn'
K_QUERY_K_FFN = 'k_query_k_ffn'
HEAD_VARIANTS = (SHARED_FFN, ONE_QUERY_K_FFN, K_QUERY_K_FFN)

VARIATION = 'variation'
WIDTH = 'width'

WEIGHTED = 'weighted'
ARGMAX = 'argmax'

CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    """Architecture level settings; input_size is (h, w)."""
    n_bins: int = 256
    k_domains: int = 4
    base_channels: int = 32
    pst_patch_sizes: tuple = (1, 2, 4)
    pst_depth: int = 2
    pst_heads: int = 4
    pst_dim: int = 256
    input_size: tuple = (384, 512)
    z_min: float = 0.0
    z_max: float = 80.0
    partition: str = SPACE_INCREASING
    head_variant: str = SHARED_FFN
    bin_type: str = VARIATION
    fusion: str = WEIGHTED
    domain_aware: bool = True
    hsc: bool = True
    epsilon: float = EPSILON
    decoder_stages: int = field(default=DECODER_STAGES, init=False)

    def __post_init__(self):
        self.pst_patch_sizes = tuple(int(p) for p in self.pst_patch_sizes)
        self.input_size = tuple(int(s) for s in self.input_size)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls) if f.init}
        return cls(**{k: v for k, v in data.items() if k in names})

    def as_dict(self):
        data = asdict(self)
        data['pst_patch_sizes'] = list(self.pst_patch_sizes)
        data['input_size'] = list(self.input_size)
        return data

    @property
    def effective_domains(self):
        """Number of bin vectors: K with domain-aware estimation, else 1."""
        return self.k_domains if self.domain_aware else 1

    @property
    def bin_queries(self):
        if self.domain_aware and self.head_variant != ONE_QUERY_K_FFN:
            return self.k_domains
        return 1

    @property
    def query_count(self):
        return self.bin_queries + (1 if self.domain_aware else 0)

    def stage_size(self, s):
        """Resolution (h, w) of stage s in 1..5, h / 2^(6-s) floored."""
        h, w = self.input_size
        return (h // 2 ** (6 - s), w // 2 ** (6 - s))

    def validate(self):
        if self.n_bins < 2:
            raise ContractError("n_bins must be >= 2")
        if self.k_domains < 1:
            raise ContractError("k_domains must be >= 1")
        if min(self.input_size) < 32:
            raise ContractError("input_size must be at least 32x32")
        if not self.pst_patch_sizes or min(self.pst_patch_sizes) < 1:
            raise ContractError("pst_patch_sizes needs positive entries")
        if self.pst_dim % self.pst_heads != 0:
            raise ContractError("pst_dim must be divisible by pst_heads")
        if self.head_variant not in HEAD_VARIANTS:
            raise ContractError("Unknown head variant '%s'" % self.head_variant)
        if self.bin_type not in (VARIATION, WIDTH):
            raise ContractError("Unknown bin type '%s'" % self.bin_type)
        if self.fusion not in (WEIGHTED, ARGMAX):
            raise ContractError("Unknown fusion '%s'" % self.fusion)
        if self.partition not in (SPACE_INCREASING, UNIFORM):
            raise ContractError("Unknown partition '%s'" % self.partition)
        f1 = self.stage_size(1)
        for p in self.pst_patch_sizes:
            if f1[0] % p or f1[1] % p:
                raise ContractError(
                    "PST patch size %d does not divide deepest feature %s"
                    % (p, f1)
                )
        return self


@dataclass
class FeaturePyramid:
    """Features F_1 (h/32) .. F_5 (h/2)."""
    features: List[torch.Tensor]


@dataclass
class QueryBundle:
    bin_query_outputs: torch.Tensor
    domain_query_output: Optional[torch.Tensor]


@dataclass
class PredictionBundle:
    """Network output; stage_depths[s-1] is None for stages that do not
    consume the bins (hsc disabled)."""
    stage_depths: list
    domain_probs: DomainProbability
    bin_bank: BinBank
    fused_centers: BinCenterVector
    full_depth: DepthMap
    probs: torch.Tensor


def _groups(channels):
    return 8 if channels % 8 == 0 else 1


class ConvStage(nn.Module):
    """2x2 stride 2 conv halving (floored) the resolution, then two
    conv-norm-GELU layers."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 2, stride=2),
            nn.GroupNorm(_groups(out_channels), out_channels),
            nn.GELU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.GroupNorm(_groups(out_channels), out_channels),
            nn.GELU()
        )

    def forward(self, x):
        return self.block(x)


class Backbone(nn.Module):
    """Five stage encoder, channels base * (1, 2, 4, 8, 16)."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.channels = [config.base_channels * 2 ** i for i in range(5)]
        in_channels = [3] + self.channels[:-1]
        self.stages = nn.ModuleList(
            ConvStage(c_in, c_out) for c_in, c_out in zip(in_channels, self.channels)
        )

    def pyramid_channels(self):
        """Channels of F_1 .. F_5."""
        return list(reversed(self.channels))

    def forward(self, image):
        if tuple(image.shape[-2:]) != self.config.input_size:
            raise ContractError(
                "Input %s does not match configured size %s"
                % (tuple(image.shape[-2:]), self.config.input_size)
            )
        features = []
        x = image
        # stage i of the encoder produces F_{5-i}; nested floor halving
        # equals h // 2^(6-s)
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return FeaturePyramid(list(reversed(features)))


class PyramidSceneTransformer(nn.Module):
    """Parallel transformer encoders over patchifications of F_1.

    All queries are appended to the token stream of the encoder with the
    smallest patch size.
    """

    def __init__(self, in_channels, config):
        super().__init__()
        d = config.pst_dim
        self.patch_sizes = config.pst_patch_sizes
        self.query_branch = int(np.argmin(self.patch_sizes))
        self.n_queries = config.query_count
        self.n_bin_queries = config.bin_queries
        self.proj = nn.Conv2d(in_channels, d, 1)
        self.patch_embeds = nn.ModuleList(
            nn.Conv2d(d, d, p, stride=p) for p in self.patch_sizes
        )
        self.encoders = nn.ModuleList(
            nn.TransformerEncoder(
                nn.TransformerEncoderLayer(
                    d, config.pst_heads, dim_feedforward=2 * d, dropout=0.0,
                    activation='gelu', batch_first=True, norm_first=True
                ),
                num_layers=config.pst_depth, enable_nested_tensor=False
            )
            for _ in self.patch_sizes
        )
        self.queries = nn.Parameter(torch.randn(self.n_queries, d) * 0.02)
        self.fuse = nn.Conv2d(d * len(self.patch_sizes), d, 1)

    def forward(self, f1, queries=None):
        x = self.proj(f1)
        batch, d, h, w = x.shape
        for p in self.patch_sizes:
            if h % p or w % p:
                raise ContractError(
                    "Patch size %d does not divide feature size %s" % (p, (h, w))
                )
        queries = self.queries if queries is None else queries

        maps = []
        query_out = None
        for i, (p, embed, encoder) in enumerate(
                zip(self.patch_sizes, self.patch_embeds, self.encoders)):
            tokens = embed(x).flatten(2).transpose(1, 2)
            if i == self.query_branch:
                tokens = torch.cat(
                    [queries.unsqueeze(0).expand(batch, -1, -1), tokens], dim=1
                )
                out = encoder(tokens)
                query_out = out[:, :self.n_queries]
                out = out[:, self.n_queries:]
            else:
                out = encoder(tokens)
            grid = out.transpose(1, 2).reshape(batch, d, h // p, w // p)
            if p > 1:
                grid = F.interpolate(grid, size=(h, w), mode='bilinear', align_corners=False)
            maps.append(grid)

        context = self.fuse(torch.cat(maps, dim=1)) + x
        domain_out = None
        if self.n_queries > self.n_bin_queries:
            domain_out = query_out[:, self.n_bin_queries]
        return context, QueryBundle(query_out[:, :self.n_bin_queries], domain_out)


def _ffn(d, n_bins):
    # no output activation: variations are sign free
    return nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, n_bins))


class BinHead(nn.Module):
    """Maps bin query outputs to per-domain bin center vectors.

    shared_ffn: one FFN applied to each of the K query outputs.
    one_query_k_ffn: K FFNs applied to a single query output.
    k_query_k_ffn: K FFNs applied one-to-one to K query outputs.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.variant = config.head_variant
        k = config.effective_domains
        d, n = config.pst_dim, config.n_bins
        if self.variant == SHARED_FFN or k == 1:
            self.ffns = nn.ModuleList([_ffn(d, n)])
        else:
            self.ffns = nn.ModuleList(_ffn(d, n) for _ in range(k))

        # start from a ramp covering half of the global range
        bias = 1.0
        if config.bin_type == VARIATION:
            bias = (config.z_max - config.z_min) / (2.0 * n)
        for ffn in self.ffns:
            nn.init.constant_(ffn[-1].bias, bias)

        if config.domain_aware:
            rds = make_partition(config.partition, config.z_min, config.z_max, k)
            uppers = rds.uppers
        else:
            uppers = (config.z_max,)
        self.register_buffer('uppers', torch.tensor(uppers, dtype=torch.float32))

    def vectors(self, bin_outputs):
        """Return raw per-domain vectors (B, K, N)."""
        k = self.config.effective_domains
        if len(self.ffns) == 1:
            out = self.ffns[0](bin_outputs)
            return out if out.shape[1] == k else out.expand(-1, k, -1)
        if bin_outputs.shape[1] == 1:
            return torch.stack([ffn(bin_outputs[:, 0]) for ffn in self.ffns], dim=1)
        return torch.stack(
            [ffn(bin_outputs[:, i]) for i, ffn in enumerate(self.ffns)], dim=1
        )

    def forward(self, bin_outputs):
        raw = self.vectors(bin_outputs)
        if self.config.bin_type == VARIATION:
            centers = variation_bin_centers(raw, self.config.epsilon)
            return BinBank(centers.centers, VARIATION_BASED)
        widths = normalize_widths(F.relu(raw), self.config.epsilon)
        centers = width_bin_centers(
            widths, self.config.z_min, self.uppers.to(raw.dtype)
        )
        return BinBank(centers.centers, WIDTH_BASED)


class DomainHead(nn.Module):
    """Linear classification of the domain query into K RD probabilities."""

    def __init__(self, config):
        super().__init__()
        self.linear = nn.Linear(config.pst_dim, config.k_domains)

    def forward(self, domain_out):
        logits = self.linear(domain_out)
        return DomainProbability(torch.softmax(logits, dim=-1), logits)


class ResidualConvBlock(nn.Module):
    """Two 3x3 convolutions with an additive skip."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(F.gelu(x))))


class HscDecoder(nn.Module):
    """Decoder applying the fused bin centers at every stage.

    Stage 1 compresses the PST context to N channels; stage s > 1 fuses the
    upsampled previous features and depth D'_{s-1} with F_s through a
    residual conv block before compressing to N channels. Each stage turns
    its per-pixel softmax into depth with the same centers.
    """

    def __init__(self, config, pyramid_channels):
        super().__init__()
        self.config = config
        n, d = config.n_bins, config.pst_dim
        self.stage1_bins = nn.Conv2d(d, n, 1)
        self.laterals = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.refines = nn.ModuleList()
        self.bins = nn.ModuleList()
        previous = d
        extra = 1 if config.hsc else 0
        for channels in pyramid_channels[1:]:
            self.laterals.append(nn.Conv2d(channels, channels, 1))
            self.merges.append(
                nn.Conv2d(previous + channels + extra, channels, 3, padding=1)
            )
            self.refines.append(ResidualConvBlock(channels))
            self.bins.append(nn.Conv2d(channels, n, 1))
            previous = channels

    def stage_depth(self, logits, centers):
        probs = torch.softmax(logits, dim=1)
        return combine_depth(probs, centers).depth, probs

    def forward(self, pyramid, context, centers):
        for s, feature in enumerate(pyramid.features, start=1):
            if tuple(feature.shape[-2:]) != self.config.stage_size(s):
                raise ContractError(
                    "Stage %d feature %s violates resolution schedule %s"
                    % (s, tuple(feature.shape[-2:]), self.config.stage_size(s))
                )
        hsc = self.config.hsc
        depth_scale = max(self.config.z_max, 1.0)

        stage_depths = []
        depth, probs = None, None
        if hsc:
            depth, probs = self.stage_depth(self.stage1_bins(context), centers)
        stage_depths.append(depth)

        x = context
        for i, feature in enumerate(pyramid.features[1:]):
            size = feature.shape[-2:]
            parts = [
                F.interpolate(x, size=size, mode='bilinear', align_corners=False),
                self.laterals[i](feature)
            ]
            if hsc:
                parts.append(F.interpolate(
                    depth.unsqueeze(1) / depth_scale, size=size,
                    mode='bilinear', align_corners=False
                ))
            x = self.refines[i](self.merges[i](torch.cat(parts, dim=1)))
            last = i == len(self.bins) - 1
            if hsc or last:
                depth, probs = self.stage_depth(self.bins[i](x), centers)
                stage_depths.append(depth)
            else:
                stage_depths.append(None)
        return stage_depths, probs


class DepthModel(nn.Module):
    """Complete network, see module docstring."""

    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        self.backbone = Backbone(config)
        channels = self.backbone.pyramid_channels()
        self.pst = PyramidSceneTransformer(channels[0], config)
        self.bin_head = BinHead(config)
        self.domain_head = DomainHead(config) if config.domain_aware else None
        self.decoder = HscDecoder(config, channels)

    def domain_probabilities(self, queries, batch, reference):
        if self.domain_head is None:
            ones = torch.ones(batch, 1, dtype=reference.dtype, device=reference.device)
            return DomainProbability(ones, None)
        return self.domain_head(queries.domain_query_output)

    def fuse(self, bank, domain):
        if self.config.fusion == ARGMAX:
            return select_bins(bank, domain)
        return fuse_bins(bank, domain)

    def forward(self, images):
        """Run the full pipeline on normalized images (B, 3, h, w)."""
        pyramid = self.backbone(images)
        context, queries = self.pst(pyramid.features[0])
        bank = self.bin_head(queries.bin_query_outputs)
        domain = self.domain_probabilities(queries, images.shape[0], images)
        fused = self.fuse(bank, domain)
        stage_depths, probs = self.decoder(pyramid, context, fused.centers)
        full = F.interpolate(
            stage_depths[-1].unsqueeze(1), size=self.config.input_size,
            mode='bilinear', align_corners=False
        ).squeeze(1)
        return PredictionBundle(
            stage_depths=stage_depths,
            domain_probs=domain,
            bin_bank=bank,
            fused_centers=fused,
            full_depth=DepthMap(full, torch.ones_like(full, dtype=torch.bool)),
            probs=probs
        )


def image_tensor(image):
    """Convert a uint8 image (h, w, 3) to a normalized tensor (3, h, w)."""
    x = torch.from_numpy(np.ascontiguousarray(image)).float() / 255.0
    return ((x - 0.5) / 0.25).permute(2, 0, 1)


def predict_with_mirror(model, images, pad_mask=None, return_bundle=False):
    """Average the prediction of images and their horizontal mirrors.

    :param DepthModel model: Model in eval mode
    :param Tensor images: Normalized images (B, 3, h, w)
    :param Tensor pad_mask: Optional padding mask (B, h, w)
    :param bool return_bundle: Also return the bundle of the direct pass
    """
    if model.training:
        raise ContractError("Mirror prediction requires eval mode")
    with torch.no_grad():
        bundle = model(images)
        mirrored = model(torch.flip(images, dims=[-1])).full_depth.depth
    depth = 0.5 * (bundle.full_depth.depth + torch.flip(mirrored, dims=[-1]))

    if pad_mask is None:
        pad_mask = torch.zeros_like(depth, dtype=torch.bool)
    # flipped back, the mirrored pass has the same padded pixels
    pred = DepthMap(depth, ~pad_mask)
    if return_bundle:
        return pred, bundle
    return pred


def predict_source_depth(model, rgb, intr, fov, device='cpu'):
    """Align, mirror-average and restore a prediction at source resolution.

    Returns (source DepthMap, DomainProbability, AlignedSample).

    :param DepthModel model: Model in eval mode
    :param ndarray rgb: Source color (H, W, 3)
    :param CameraIntrinsics intr: Source intrinsics
    :param FovSpec fov: Target FOV
    :param str device: Torch device
    """
    aligned = align_fov(rgb, None, intr, fov)
    images = image_tensor(aligned.image).unsqueeze(0).to(device)
    pad_mask = torch.from_numpy(aligned.pad_mask).unsqueeze(0).to(device)
    dtype = next(model.parameters()).dtype
    images = images.to(dtype)

    pred, bundle = predict_with_mirror(model, images, pad_mask, return_bundle=True)

    depth = pred.depth[0].clamp_min(EPSILON).cpu().numpy()
    restored = inverse_align(DepthMap(depth, pred.valid[0].cpu().numpy()), aligned, intr)
    return restored, bundle.domain_probs, aligned


def save_checkpoint(path, model, optimizer=None, epoch=0, extra=None):
    """Write versioned checkpoint with config echo and named tensors.

    :param str path: Output path
    :param DepthModel model: Model
    :param Optimizer optimizer: Optional optimizer state to store
    :param int epoch: Last completed epoch
    :param dict extra: Additional plain data (run config, seed)
    """
    payload = {
        'format_version': CHECKPOINT_FORMAT,
        'model_config': model.config.as_dict(),
        'state_dict': model.state_dict(),
        'epoch': int(epoch),
        'extra': extra or {}
    }
    if optimizer is not None:
        payload['optimizer'] = optimizer.state_dict()
    torch.save(payload, path)


def load_checkpoint(path, config=None, map_location='cpu'):
    """Load checkpoint and rebuild its model.

    Raises CheckpointError when the file is unreadable, has another format
    version or its config differs from the given ModelConfig.

    :param str path: Checkpoint path
    :param ModelConfig config: Expected model config or None
    :param str map_location: Torch device for tensors
    """
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as e:
        raise CheckpointError("Could not read checkpoint %s: %s" % (path, e))

    if payload.get('format_version') != CHECKPOINT_FORMAT:
        raise CheckpointError(
            "Unsupported checkpoint format %s" % payload.get('format_version')
        )
    stored = ModelConfig.from_dict(payload['model_config'])
    if config is not None:
        expected = config.as_dict()
        actual = stored.as_dict()
        mismatched = sorted(k for k in expected if expected[k] != actual.get(k))
        if mismatched:
            raise CheckpointError(
                "Checkpoint config mismatch in: %s" % ", ".join(mismatched)
            )

    model = DepthModel(stored)
    try:
        model.load_state_dict(payload['state_dict'])
    except RuntimeError as e:
        raise CheckpointError("Checkpoint weights do not fit config: %s" % e)
    return model, payload
