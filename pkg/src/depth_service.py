import csv
import itertools
import json
import os
from dataclasses import replace

import cv2
import numpy as np
import torch

from bincore import DepthMap, normalize_rows, occupancy_counts
from depth_model import image_tensor, load_checkpoint, predict_source_depth, predict_with_mirror
from domains import SPACE_INCREASING, UNIFORM, make_partition
from errors import (
    CheckpointError, ConfigError, ContractError, DatasetError,
    MissingIntrinsicsError, NonFiniteLossError
)
from eval_metrics import (
    evaluate_samples, mri_eta, mri_theta, per_frame_series,
    read_metrics_report, write_metrics_report
)
from figures import FigureWriter
from fov_alignment import CameraIntrinsics, align_fov
from objectives import downsample_gt
from rgbd_samples import RgbdDirectory, read_color, write_depth_raster
from run_config import BASELINE_ROW, RunConfig, ablation_matrix, k_sweep
from synth_scenes import make_dataset, make_sequence, synth_scene
from trainer import CONFIG_ECHO_NAME, Trainer, hash_split, load_samples

ERROR_DETAILS_LOG_ONLY = os.environ.get(
    'RANGEDEPTH_ERROR_DETAILS_LOG_ONLY', 'False').lower() == 'true'

REPORT_STEM = 'eval_report'

# samples entering the occupancy heatmaps
OCCUPANCY_SAMPLES = 64
OCCUPANCY_BUCKETS = 32

USER_ERRORS = (
    (ConfigError, "error.config_invalid"),
    (MissingIntrinsicsError, "error.missing_intrinsics"),
    (DatasetError, "error.dataset_invalid"),
    (CheckpointError, "error.checkpoint_invalid"),
    (ContractError, "error.invalid_input"),
)


class DepthService():
    """DepthService class

    Train, evaluate and apply range domain aware depth models. Every
    command returns a result dict, or a dict with 'error' and 'error_code'
    (1 for user errors, 2 for internal errors).
    """

    def __init__(self, logger, translator, device=None):
        """Constructor

        :param Logger logger: Application logger
        :param Translator translator: Translator for user-facing messages
        :param str device: Torch device overriding the run config
        """
        self.logger = logger
        self.translator = translator
        self.device = device

    def train(self, config, resume=None):
        """Train a model.

        :param RunConfig config: Run config
        :param str resume: Optional checkpoint to continue from
        """
        return self.call(self.train_run, config, resume)

    def evaluate(self, checkpoint, config=None, dataset=None, split='test',
                 baseline=None, output_dir=None):
        """Evaluate a checkpoint with the full protocol.

        :param str checkpoint: Checkpoint path
        :param RunConfig config: Run config, defaults to the checkpoint's
        :param str dataset: 'synth' or dataset directory, defaults to config
        :param str split: 'train', 'test' or 'all'
        :param str baseline: JSON report of a baseline for mRI scores
        :param str output_dir: Report directory, defaults to the checkpoint's
        """
        return self.call(
            self.evaluate_checkpoint, checkpoint, config, dataset, split,
            baseline, output_dir
        )

    def predict(self, checkpoint, image_path, fx, fy, cx=None, cy=None,
                output_dir='.', config=None):
        """Predict the depth of a single image.

        :param str checkpoint: Checkpoint path
        :param str image_path: Color image
        :param float fx: Focal length x in pixels
        :param float fy: Focal length y in pixels
        :param float cx: Principal point x, defaults to the image center
        :param float cy: Principal point y, defaults to the image center
        :param str output_dir: Output directory
        :param RunConfig config: Run config, defaults to the checkpoint's
        """
        return self.call(
            self.predict_image, checkpoint, image_path, fx, fy, cx, cy, output_dir,
            config
        )

    def partition(self, config):
        """Return the range domain tables of both partition strategies."""
        return self.call(self.partition_tables, config)

    def figures(self, checkpoint, config=None, output_dir=None,
                width_checkpoint=None, sweep_dir=None, n_images=2,
                sequence_length=24):
        """Emit figures with CSV twins.

        :param str checkpoint: Checkpoint of the model to inspect
        :param RunConfig config: Run config, defaults to the checkpoint's
        :param str output_dir: Output directory
        :param str width_checkpoint: Width based model for the occupancy
                                     comparison
        :param str sweep_dir: Directory of K sweep runs
        :param int n_images: Images per range domain for bin center curves
        :param int sequence_length: Frames of the per-frame RMSE sequence
        """
        return self.call(
            self.write_figures, checkpoint, config, output_dir,
            width_checkpoint, sweep_dir, n_images, sequence_length
        )

    def sweep_k(self, config, output_dir=None, k_values=(1, 2, 3, 4, 5, 6),
                uniform_k=4):
        """Train and evaluate one run per K plus the uniform partition."""
        return self.call(self.run_k_sweep, config, output_dir, k_values, uniform_k)

    def ablate(self, config, output_dir=None, names=None):
        """Train and evaluate the ablation matrix, mRI_eta vs baseline."""
        return self.call(self.run_ablation, config, output_dir, names)

    def call(self, func, *args):
        """Run command and turn exceptions into error results."""
        try:
            return func(*args)
        except NonFiniteLossError as e:
            self.logger.error(str(e))
            return self.error_result("error.non_finite_loss", 2, e.breakdown)
        except tuple(cls for cls, _ in USER_ERRORS) as e:
            key = next(key for cls, key in USER_ERRORS if isinstance(e, cls))
            self.logger.error("%s: %s" % (type(e).__name__, e))
            return self.error_result(key, 1, getattr(e, "details", None) or str(e))
        except Exception as e:
            self.logger.exception(e)
            return self.error_result("error.internal", 2, str(e))

    def error_result(self, key, code, details):
        result = {'error': self.translator.tr(key), 'error_code': code}
        if ERROR_DETAILS_LOG_ONLY:
            self.logger.error("Error details: %s" % details)
        else:
            result['error_details'] = details
        return result

    def run_device(self, config):
        return self.device or config.device()

    def load_model(self, checkpoint, config=None):
        """Return (model in eval mode, RunConfig) of a checkpoint."""
        if config is None:
            model, payload = load_checkpoint(checkpoint)
            config = payload_run_config(payload, checkpoint)
        else:
            model, _ = load_checkpoint(checkpoint, config.model_config())
        model.to(self.run_device(config)).eval()
        return model, config

    def eval_samples(self, config, dataset, split):
        dataset = dataset or config.dataset
        if split not in ('train', 'test', 'all'):
            raise ContractError("Unknown split '%s'" % split)
        if dataset == 'synth':
            data = make_dataset(
                config.synth_template(), config.synth_count, config.synth_rd_mix,
                config.val_fraction
            )
            if split == 'all':
                return itertools.chain(data.train, data.test)
            return data.train if split == 'train' else data.test

        directory = RgbdDirectory(dataset, self.logger)
        if split == 'all':
            return directory
        train, test = hash_split(directory.frame_ids, config.val_fraction)
        return [directory[i] for i in (train if split == 'train' else test)]

    def evaluate_model(self, model, config, samples, output_dir, baseline=None,
                       extra=None):
        """Evaluate model on samples and write the report."""
        summary = evaluate_samples(
            model, samples, config.fov_spec(), config.range_domains(),
            config.eval_cap, self.run_device(config), config.rd_percentile,
            logger=self.logger
        )
        rows = summary.rows()
        if 'all' not in rows:
            raise DatasetError("No frame has jointly valid pixels")
        extra = dict(extra or {})
        extra['rd_accuracy'] = summary.rd_accuracy
        extra['skipped_frames'] = summary.skipped

        if baseline is not None:
            try:
                base = read_metrics_report(baseline)
                base_all = base['rows']['all']
            except (OSError, ValueError, KeyError) as e:
                raise DatasetError("Baseline report %s unusable: %s" % (baseline, e), baseline)
            extra['baseline'] = baseline
            extra['mri_theta'] = mri_theta(rows['all'], base_all, tuple(config.mri_metrics))
            shared = sorted(
                name for name in rows
                if name.startswith('dataset.') and name in base['rows']
            )
            if shared:
                extra['mri_eta'] = mri_eta(
                    [rows[name].rmse for name in shared],
                    [base['rows'][name].rmse for name in shared]
                )

        os.makedirs(output_dir, exist_ok=True)
        stem = os.path.join(output_dir, REPORT_STEM)
        write_metrics_report(stem, rows, extra)
        self.logger.info("Wrote evaluation report %s.json" % stem)
        return {
            'report': stem + '.json',
            'rows': {name: record.as_dict() for name, record in rows.items()},
            **extra
        }

    def train_run(self, config, resume=None, samples=None):
        trainer = Trainer(config, self.logger)
        if self.device:
            trainer.device = self.device
        result = trainer.train(resume, samples)
        result.pop('model')
        return result

    def evaluate_checkpoint(self, checkpoint, config, dataset, split, baseline,
                            output_dir):
        model, config = self.load_model(checkpoint, config)
        samples = self.eval_samples(config, dataset, split)
        output_dir = output_dir or os.path.dirname(os.path.abspath(checkpoint))
        return self.evaluate_model(
            model, config, samples, output_dir, baseline,
            {'checkpoint': checkpoint, 'split': split}
        )

    def predict_image(self, checkpoint, image_path, fx, fy, cx, cy, output_dir,
                      config=None):
        if fx is None or fy is None:
            raise MissingIntrinsicsError(
                "Focal lengths are required for FOV alignment of %s" % image_path,
                image_path
            )
        model, config = self.load_model(checkpoint, config)
        rgb = read_color(image_path)
        height, width = rgb.shape[:2]
        intr = CameraIntrinsics(float(fx), float(fy), width, height, cx, cy)
        depth, domain, _ = predict_source_depth(
            model, rgb, intr, config.fov_spec(), self.run_device(config)
        )
        probs = [float(p) for p in domain.probs[0].cpu()]

        os.makedirs(output_dir, exist_ok=True)
        stem = os.path.join(output_dir, os.path.splitext(os.path.basename(image_path))[0])
        sidecar = {
            'fx': intr.fx, 'fy': intr.fy, 'cx': intr.cx, 'cy': intr.cy,
            'max_range': config.z_max,
            'rd_probabilities': probs
        }
        write_depth_raster(stem + '_depth.png', depth, sidecar_path=stem + '_depth.json',
                           sidecar=sidecar)
        cv2.imwrite(stem + '_preview.png', colorize(depth, config.z_max))
        self.logger.info("Wrote depth raster %s_depth.png" % stem)
        return {
            'depth_raster': stem + '_depth.png',
            'sidecar': stem + '_depth.json',
            'preview': stem + '_preview.png',
            'rd_probabilities': probs
        }

    def partition_tables(self, config):
        result = {
            'z_min': config.z_min, 'z_max': config.z_max, 'k_domains': config.k_domains
        }
        for strategy in (SPACE_INCREASING, UNIFORM):
            rds = make_partition(strategy, config.z_min, config.z_max, config.k_domains)
            result[strategy] = [
                {'k': k, 'interval': list(rds.interval(k)), 'bucket': list(rds.bucket(k))}
                for k in range(1, rds.k_count + 1)
            ]
        return result

    def bin_centers(self, model, sample, fov, device):
        aligned = align_fov(sample.rgb, None, sample.intrinsics, fov)
        dtype = next(model.parameters()).dtype
        images = image_tensor(aligned.image).unsqueeze(0).to(device=device, dtype=dtype)
        pad_mask = torch.from_numpy(aligned.pad_mask).unsqueeze(0).to(device)
        _, bundle = predict_with_mirror(model, images, pad_mask, return_bundle=True)
        return bundle.fused_centers.centers[0].cpu().numpy()

    def occupancy(self, model, config, samples):
        """Row-normalized depth bucket x bin occupancy over samples."""
        fov = config.fov_spec()
        device = self.run_device(config)
        depth_range = (float(config.z_min), float(config.z_max))
        dtype = next(model.parameters()).dtype
        counts = None
        for sample in samples:
            aligned = align_fov(sample.rgb, sample.depth, sample.intrinsics, fov)
            images = image_tensor(aligned.image).unsqueeze(0).to(device=device, dtype=dtype)
            with torch.no_grad():
                probs = model(images).probs[0]
            gt = DepthMap(
                torch.from_numpy(aligned.depth.depth).unsqueeze(0),
                torch.from_numpy(aligned.depth.valid).unsqueeze(0)
            )
            small = downsample_gt(gt, probs.shape[-2:])
            if not bool(small.valid.any()):
                continue
            frame = occupancy_counts(
                probs, DepthMap(small.depth[0], small.valid[0]),
                OCCUPANCY_BUCKETS, depth_range
            )
            counts = frame if counts is None else counts + frame
        if counts is None:
            raise DatasetError("No sample has valid depth for occupancy statistics")
        edges = np.linspace(depth_range[0], depth_range[1], OCCUPANCY_BUCKETS + 1)
        return normalize_rows(counts).numpy(), edges

    def write_figures(self, checkpoint, config, output_dir, width_checkpoint,
                      sweep_dir, n_images, sequence_length):
        model, config = self.load_model(checkpoint, config)
        output_dir = output_dir or os.path.join(
            os.path.dirname(os.path.abspath(checkpoint)), 'figures'
        )
        writer = FigureWriter(output_dir, self.logger)
        fov = config.fov_spec()
        device = self.run_device(config)
        template = config.synth_template()
        paths = []
        warnings = []

        curves = {}
        for k in sorted({1, config.k_domains}):
            for j in range(n_images):
                sample = synth_scene(replace(template, seed=template.seed + j, rd_index=k))
                curves['rd%d_seed%d' % (k, template.seed + j)] = self.bin_centers(
                    model, sample, fov, device
                )
        paths += writer.bin_center_curves(curves)

        _, test = load_samples(config, self.logger)
        subset = [test[i] for i in range(min(len(test), OCCUPANCY_SAMPLES))]
        matrix, edges = self.occupancy(model, config, subset)
        paths += writer.occupancy_heatmap(
            matrix, edges, 'occupancy_%s' % config.bin_type, "%s bins" % config.bin_type
        )
        if width_checkpoint is not None:
            other, other_config = self.load_model(width_checkpoint)
            matrix, edges = self.occupancy(other, other_config, subset)
            paths += writer.occupancy_heatmap(
                matrix, edges, 'occupancy_%s' % other_config.bin_type,
                "%s bins" % other_config.bin_type
            )
        else:
            warnings.append(self.translator.tr("warning.missing_width_checkpoint"))

        frames = make_sequence(template, sequence_length)
        series = per_frame_series(frames, model, fov, config.eval_cap, device, self.logger)
        paths += writer.per_frame_rmse(series)

        if sweep_dir is not None and not os.path.isdir(sweep_dir):
            warnings.append(self.translator.tr("warning.missing_sweep_dir") % sweep_dir)
        elif sweep_dir is not None:
            rows, missing = collect_sweep_rows(sweep_dir)
            for name in missing:
                warnings.append(self.translator.tr("warning.missing_sweep_entry") % name)
            if rows:
                paths += writer.k_sweep(rows)

        for warning in warnings:
            self.logger.warning(warning)
        return {'figures': paths, 'warnings': warnings}

    def train_and_evaluate(self, config, samples):
        result = self.train_run(config, samples=samples)
        model, _ = self.load_model(result['checkpoint'], config)
        return self.evaluate_model(
            model, config, samples[1], config.output_dir, extra={'run': config.output_dir}
        )

    def run_k_sweep(self, config, output_dir, k_values, uniform_k):
        output_dir = output_dir or os.path.join(config.output_dir, 'sweep_k')
        rows = []
        for name, overrides in k_sweep(k_values, uniform_k):
            run = config.with_overrides(dict(overrides, output_dir=os.path.join(output_dir, name)))
            report = self.train_and_evaluate(run, load_samples(run, self.logger))
            rows.append({
                'name': name, 'k': run.k_domains, 'partition': run.partition,
                'delta1': report['rows']['all']['delta1'],
                'rmse': report['rows']['all']['rmse']
            })
        paths = FigureWriter(output_dir, self.logger).k_sweep(rows)
        return {'rows': rows, 'figures': paths}

    def run_ablation(self, config, output_dir, names=None):
        output_dir = output_dir or os.path.join(config.output_dir, 'ablation')
        matrix = ablation_matrix()
        if names:
            unknown = set(names) - {name for name, _ in matrix}
            if unknown:
                raise ConfigError("Unknown ablation rows", sorted(unknown))
            matrix = [
                (name, overrides) for name, overrides in matrix
                if name in names or name == BASELINE_ROW
            ]
        samples = load_samples(config, self.logger)
        reports = {}
        for name, overrides in matrix:
            run = config.with_overrides(dict(overrides, output_dir=os.path.join(output_dir, name)))
            reports[name] = self.train_and_evaluate(run, samples)

        baseline = reports[BASELINE_ROW]['rows']
        groups = range_domain_rows(baseline)
        rows = []
        for name, _ in matrix:
            report = reports[name]['rows']
            shared = [g for g in groups if g in report]
            rows.append({
                'name': name,
                'rmse': {g: report[g]['rmse'] for g in shared},
                'mri_eta': mri_eta(
                    [report[g]['rmse'] for g in shared],
                    [baseline[g]['rmse'] for g in shared]
                )
            })
        os.makedirs(output_dir, exist_ok=True)
        table_path = os.path.join(output_dir, 'ablation.csv')
        write_ablation_csv(table_path, rows, groups)
        self.logger.info("Wrote ablation table %s" % table_path)
        return {'rows': rows, 'table': table_path}


def colorize(depth, max_depth):
    """Magma preview of a DepthMap; invalid pixels are black."""
    values = np.asarray(depth.depth, dtype=np.float64)
    scaled = np.clip(values / float(max_depth), 0.0, 1.0)
    image = cv2.applyColorMap((scaled * 255).astype(np.uint8), cv2.COLORMAP_MAGMA)
    image[~np.asarray(depth.valid, dtype=bool)] = 0
    return image


def range_domain_rows(rows):
    """Return the sorted rd<k> row names of a report."""
    return sorted(n for n in rows if n.startswith('rd') and n[2:].isdigit())


def collect_sweep_rows(sweep_dir):
    """Return (rows, missing names) of the runs below a sweep directory."""
    rows = []
    missing = []
    for name in sorted(os.listdir(sweep_dir)):
        run_dir = os.path.join(sweep_dir, name)
        if not os.path.isdir(run_dir):
            continue
        report_path = os.path.join(run_dir, REPORT_STEM + '.json')
        config_path = os.path.join(run_dir, CONFIG_ECHO_NAME)
        if not (os.path.isfile(report_path) and os.path.isfile(config_path)):
            missing.append(name)
            continue
        with open(config_path) as fh:
            run = json.load(fh)
        report = read_metrics_report(report_path)
        if 'all' not in report['rows']:
            missing.append(name)
            continue
        rows.append({
            'name': name, 'k': int(run['k_domains']), 'partition': run['partition'],
            'delta1': report['rows']['all'].delta1, 'rmse': report['rows']['all'].rmse
        })
    return rows, missing


def write_ablation_csv(path, rows, groups):
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['name'] + ['rmse.%s' % g for g in groups] + ['mri_eta'])
        for row in rows:
            writer.writerow(
                [row['name']]
                + [row['rmse'].get(g, '') for g in groups]
                + [row['mri_eta']]
            )


def payload_run_config(payload, checkpoint):
    values = (payload.get('extra') or {}).get('run_config')
    if values is None:
        raise CheckpointError("Checkpoint %s carries no run config" % checkpoint)
    return RunConfig(values)


def checkpoint_run_config(checkpoint):
    """Return the RunConfig a checkpoint was trained with."""
    _, payload = load_checkpoint(checkpoint)
    return payload_run_config(payload, checkpoint)
