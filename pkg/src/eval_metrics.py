"""Depth evaluation metrics and mean relative improvement scores.

Metrics are accumulated as per-pixel sums so that per-dataset and per range
domain rows are exact pixel partitions of the overall row.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch

from bincore import (
    EPSILON, DepthMap, bin_depth_rank_correlation, bin_depth_statistics,
    peak_bin_index
)
from depth_model import image_tensor, predict_source_depth, predict_with_mirror
from domains import LABEL_PERCENTILE, rd_label
from errors import ContractError
from fov_alignment import align_fov, inverse_align
from objectives import downsample_gt

DELTA_BASE = 1.25

METRIC_NAMES = (
    'delta1', 'delta2', 'delta3', 'rel', 'rmse', 'log10', 'sq_rel', 'rmse_log'
)
HIGHER_IS_BETTER = ('delta1', 'delta2', 'delta3')

# metrics entering mRI_theta
MRI_THETA_METRICS = ('delta1', 'rel', 'rmse')

SERIES_FIELDS = ('frame_index', 'rmse', 'indoor_flag')


@dataclass
class MetricRecord:
    delta1: float
    delta2: float
    delta3: float
    rel: float
    rmse: float
    log10: float
    sq_rel: float
    rmse_log: float
    n_pixels: int

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{
            name: (int(data[name]) if name == 'n_pixels' else float(data[name]))
            for name in METRIC_NAMES + ('n_pixels',)
        })

    def value(self, name):
        if name not in METRIC_NAMES:
            raise ContractError("Unknown metric '%s'" % name)
        return getattr(self, name)


@dataclass(frozen=True)
class SeriesPoint:
    """RMSE of one frame; rmse is None for frames without valid pixels."""
    frame_index: int
    rmse: Optional[float]
    indoor_flag: bool


def _numpy(values):
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy()
    return np.asarray(values)


def joint_pixels(pred, gt, cap):
    """Return (pred, gt) float64 vectors of jointly valid pixels.

    Validity is gt valid, gt <= cap and pred valid; predictions are clamped
    to at least 1e-3.

    :param DepthMap pred: Prediction registered with gt
    :param DepthMap gt: Ground truth
    :param float cap: Evaluation cap in meters
    """
    pred_depth, gt_depth = _numpy(pred.depth), _numpy(gt.depth)
    if pred_depth.shape != gt_depth.shape:
        raise ContractError(
            "Prediction %s and ground truth %s are not registered"
            % (pred_depth.shape, gt_depth.shape)
        )
    mask = _numpy(gt.valid).astype(bool) & _numpy(pred.valid).astype(bool)
    mask &= gt_depth > 0
    if cap is not None:
        mask &= gt_depth <= cap
    p = np.maximum(pred_depth[mask].astype(np.float64), EPSILON)
    g = gt_depth[mask].astype(np.float64)
    return p, g


class MetricAccumulator:
    """Sums of per-pixel statistics over any number of frames."""

    def __init__(self):
        """Constructor"""
        self.n_pixels = 0
        self.delta_counts = [0, 0, 0]
        self.abs_rel = 0.0
        self.sq_error = 0.0
        self.log10_error = 0.0
        self.sq_rel = 0.0
        self.log_sq_error = 0.0

    def add_pixels(self, p, g):
        """Add jointly valid pixel vectors.

        :param ndarray p: Predicted depths (clamped)
        :param ndarray g: Ground truth depths
        """
        if p.size == 0:
            return self
        ratio = np.maximum(p / g, g / p)
        for k in range(3):
            self.delta_counts[k] += int(np.count_nonzero(ratio < DELTA_BASE ** (k + 1)))
        diff = p - g
        self.n_pixels += int(p.size)
        self.abs_rel += float(np.sum(np.abs(diff) / g))
        self.sq_error += float(np.sum(diff ** 2))
        self.log10_error += float(np.sum(np.abs(np.log10(p) - np.log10(g))))
        self.sq_rel += float(np.sum(diff ** 2 / g))
        self.log_sq_error += float(np.sum((np.log(p) - np.log(g)) ** 2))
        return self

    def add(self, pred, gt, cap):
        """Add one frame, see joint_pixels."""
        return self.add_pixels(*joint_pixels(pred, gt, cap))

    def merge(self, other):
        self.n_pixels += other.n_pixels
        self.delta_counts = [a + b for a, b in zip(self.delta_counts, other.delta_counts)]
        self.abs_rel += other.abs_rel
        self.sq_error += other.sq_error
        self.log10_error += other.log10_error
        self.sq_rel += other.sq_rel
        self.log_sq_error += other.log_sq_error
        return self

    def record(self):
        """Return MetricRecord of all accumulated pixels."""
        if self.n_pixels == 0:
            raise ContractError("No jointly valid pixels to evaluate")
        n = float(self.n_pixels)
        return MetricRecord(
            delta1=self.delta_counts[0] / n,
            delta2=self.delta_counts[1] / n,
            delta3=self.delta_counts[2] / n,
            rel=self.abs_rel / n,
            rmse=math.sqrt(self.sq_error / n),
            log10=self.log10_error / n,
            sq_rel=self.sq_rel / n,
            rmse_log=math.sqrt(self.log_sq_error / n),
            n_pixels=self.n_pixels
        )


def compute_metrics(pred, gt, cap=None):
    """Metric suite of one prediction.

    :param DepthMap pred: Prediction
    :param DepthMap gt: Ground truth
    :param float cap: Evaluation cap in meters (None for no cap)
    """
    return MetricAccumulator().add(pred, gt, cap).record()


def _metric_values(record, metrics):
    if isinstance(record, MetricRecord):
        return [record.value(name) for name in metrics]
    if isinstance(record, dict):
        return [float(record[name]) for name in metrics]
    values = [float(v) for v in record]
    if len(values) != len(metrics):
        raise ContractError(
            "Expected %d metric values (%s), got %d"
            % (len(metrics), ", ".join(metrics), len(values))
        )
    return values


def mri_theta(candidate, baseline, metrics=MRI_THETA_METRICS):
    """Mean relative improvement across metrics in percent.

    Higher-is-better metrics contribute (c - b) / b, lower-is-better ones
    (b - c) / b.

    :param MetricRecord|dict|list candidate: Candidate metrics
    :param MetricRecord|dict|list baseline: Baseline metrics
    :param tuple metrics: Names of the metrics to average over
    """
    cand = _metric_values(candidate, metrics)
    base = _metric_values(baseline, metrics)
    gains = []
    for name, c, b in zip(metrics, cand, base):
        if b == 0:
            raise ContractError("Baseline metric '%s' is zero" % name)
        if name in HIGHER_IS_BETTER:
            gains.append((c - b) / b)
        else:
            gains.append((b - c) / b)
    return 100.0 * sum(gains) / len(gains)


def mri_eta(candidate_rmse, baseline_rmse):
    """Mean relative RMSE improvement across datasets in percent.

    :param list candidate_rmse: Candidate RMSE per dataset
    :param list baseline_rmse: Baseline RMSE per dataset
    """
    cand = [float(v) for v in candidate_rmse]
    base = [float(v) for v in baseline_rmse]
    if len(cand) != len(base) or not cand:
        raise ContractError(
            "RMSE vectors differ in length (%d vs %d)" % (len(cand), len(base))
        )
    if any(b == 0 for b in base):
        raise ContractError("Baseline RMSE contains zero")
    return 100.0 * sum((b - c) / b for c, b in zip(cand, base)) / len(base)


def per_frame_series(frames, model, fov, cap=None, device='cpu', logger=None):
    """RMSE per frame of an ordered frame sequence.

    Each frame is aligned, predicted with mirror averaging and restored to
    its source grid before evaluation. Frames without jointly valid pixels
    are recorded with rmse None.

    :param list frames: Ordered DepthSamples
    :param DepthModel model: Model in eval mode
    :param FovSpec fov: Target FOV
    :param float cap: Evaluation cap, defaults to each frame's max_range
    :param str device: Torch device
    :param Logger logger: Optional logger
    """
    series = []
    for index, sample in enumerate(frames):
        pred, _, _ = predict_source_depth(model, sample.rgb, sample.intrinsics, fov, device)
        frame_cap = cap if cap is not None else sample.meta.get('max_range')
        p, g = joint_pixels(pred, sample.depth, frame_cap)
        rmse = None
        if p.size > 0:
            rmse = MetricAccumulator().add_pixels(p, g).record().rmse
        elif logger is not None:
            logger.warning("Frame %d has no valid pixels" % index)
        series.append(SeriesPoint(index, rmse, bool(sample.meta.get('indoor_flag', False))))
    return series


def write_series_csv(path, series):
    """Write series with columns frame_index,rmse,indoor_flag.

    Missing RMSE values are written as empty fields.
    """
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(SERIES_FIELDS)
        for point in series:
            writer.writerow([
                point.frame_index,
                '' if point.rmse is None else repr(float(point.rmse)),
                int(point.indoor_flag)
            ])


def read_series_csv(path):
    with open(path, newline='') as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SERIES_FIELDS:
            raise ContractError("Unexpected series columns %s" % reader.fieldnames)
        series = [
            SeriesPoint(
                int(row['frame_index']),
                None if row['rmse'] == '' else float(row['rmse']),
                row['indoor_flag'] == '1'
            )
            for row in reader
        ]
    indices = [p.frame_index for p in series]
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise ContractError("Series frames are not strictly ordered")
    return series


def write_metrics_report(stem, rows, extra=None):
    """Write a flat key=value text report and a JSON report.

    Text keys are '<row>.<metric>', e.g. 'all.rmse=0.351'.

    :param str stem: Output path without extension
    :param dict rows: Row name -> MetricRecord
    :param dict extra: Additional flat values (mRI scores, baseline name)
    """
    extra = extra or {}
    lines = []
    for row, record in rows.items():
        for key, value in record.as_dict().items():
            lines.append("%s.%s=%s" % (row, key, value))
    for key in sorted(extra):
        lines.append("%s=%s" % (key, extra[key]))
    with open(stem + '.txt', 'w') as fh:
        fh.write("\n".join(lines) + "\n")

    report = {
        'rows': {row: record.as_dict() for row, record in rows.items()}
    }
    report.update(extra)
    with open(stem + '.json', 'w') as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


def read_metrics_report(path):
    """Read JSON metrics report, rows as MetricRecords."""
    with open(path) as fh:
        report = json.load(fh)
    report['rows'] = {
        row: MetricRecord.from_dict(values)
        for row, values in report.get('rows', {}).items()
    }
    return report


@dataclass
class EvalSummary:
    """Accumulated protocol evaluation of a sample set."""
    overall: MetricAccumulator
    per_dataset: dict
    per_rd: dict
    rd_hits: int = 0
    rd_total: int = 0
    peak_indices: dict = None
    bin_mass: object = None
    bin_depth_sum: object = None
    skipped: int = 0

    @property
    def rd_accuracy(self):
        if self.rd_total == 0:
            return None
        return self.rd_hits / float(self.rd_total)

    def rows(self):
        """MetricRecords of all non-empty rows: 'all', 'dataset.<id>' and
        'rd<k>'."""
        rows = {}
        if self.overall.n_pixels:
            rows['all'] = self.overall.record()
        for name in sorted(self.per_dataset):
            if self.per_dataset[name].n_pixels:
                rows['dataset.%s' % name] = self.per_dataset[name].record()
        for k in sorted(self.per_rd):
            if self.per_rd[k].n_pixels:
                rows['rd%d' % k] = self.per_rd[k].record()
        return rows

    def mean_peak_index(self, k):
        values = (self.peak_indices or {}).get(k) or []
        if not values:
            return None
        return float(np.mean(values))

    def rank_correlation(self):
        if self.bin_mass is None:
            return None
        return bin_depth_rank_correlation(self.bin_mass, self.bin_depth_sum)


def evaluate_samples(model, samples, fov, rds, cap=None, device='cpu',
                     percentile=None, collect_bins=False, logger=None):
    """Evaluate a model with the full protocol.

    Every sample is FOV aligned, predicted with mirror averaging, restored
    to its source grid and compared with the source ground truth. Rows are
    accumulated per dataset and per ground truth range domain.

    :param DepthModel model: Model in eval mode
    :param Iterable samples: DepthSamples
    :param FovSpec fov: Target FOV
    :param RangeDomainSet rds: Range domains for the per-RD rows
    :param float cap: Evaluation cap, defaults to each sample's max_range
    :param str device: Torch device
    :param float percentile: Label percentile
    :param bool collect_bins: Accumulate bin occupancy statistics
    :param Logger logger: Optional logger
    """
    percentile = percentile or LABEL_PERCENTILE
    summary = EvalSummary(MetricAccumulator(), {}, {}, peak_indices={})
    dtype = next(model.parameters()).dtype
    for sample in samples:
        frame = sample.meta.get('frame_id')
        if not np.asarray(sample.depth.valid).any():
            summary.skipped += 1
            if logger is not None:
                logger.warning("Skipping frame %s without valid depth" % frame)
            continue
        intr = sample.intrinsics
        aligned = align_fov(sample.rgb, sample.depth, intr, fov)
        images = image_tensor(aligned.image).unsqueeze(0).to(device=device, dtype=dtype)
        pad_mask = torch.from_numpy(aligned.pad_mask).unsqueeze(0).to(device)
        pred, bundle = predict_with_mirror(model, images, pad_mask, return_bundle=True)
        restored = inverse_align(
            DepthMap(
                pred.depth[0].clamp_min(EPSILON).cpu().numpy(),
                pred.valid[0].cpu().numpy()
            ),
            aligned, intr
        )

        label = rd_label(sample.depth, rds, percentile)
        if model.config.domain_aware:
            predicted = int(bundle.domain_probs.probs[0].argmax()) + 1
            summary.rd_hits += int(predicted == label)
            summary.rd_total += 1
        summary.peak_indices.setdefault(label, []).append(
            peak_bin_index(bundle.fused_centers.centers[0].cpu())
        )

        if collect_bins and aligned.depth.valid.any():
            probs = bundle.probs[0]
            gt = DepthMap(
                torch.from_numpy(aligned.depth.depth).unsqueeze(0),
                torch.from_numpy(aligned.depth.valid).unsqueeze(0)
            )
            small = downsample_gt(gt, probs.shape[-2:])
            if bool(small.valid.any()):
                mass, depth_sum = bin_depth_statistics(probs, DepthMap(small.depth[0], small.valid[0]))
                if summary.bin_mass is None:
                    summary.bin_mass, summary.bin_depth_sum = mass, depth_sum
                else:
                    summary.bin_mass += mass
                    summary.bin_depth_sum += depth_sum

        frame_cap = cap if cap is not None else sample.meta.get('max_range')
        p, g = joint_pixels(restored, sample.depth, frame_cap)
        if p.size == 0:
            summary.skipped += 1
            if logger is not None:
                logger.warning("Frame %s has no jointly valid pixels" % frame)
            continue
        dataset = sample.meta.get('dataset_id') or 'default'
        summary.overall.add_pixels(p, g)
        summary.per_dataset.setdefault(dataset, MetricAccumulator()).add_pixels(p, g)
        summary.per_rd.setdefault(label, MetricAccumulator()).add_pixels(p, g)
    return summary
