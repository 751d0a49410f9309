"""Long toy training runs, enabled with RANGEDEPTH_ACCEPTANCE=1.

    RANGEDEPTH_ACCEPTANCE=1 python -m unittest tests.acceptance_tests
"""
import logging
import os
import tempfile
import unittest

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader

from bincore import DepthMap
from depth_model import (
    K_QUERY_K_FFN, ONE_QUERY_K_FFN, SHARED_FFN, DepthModel, load_checkpoint
)
from eval_metrics import compute_metrics, evaluate_samples
from objectives import total_loss
from run_config import RunConfig
from sample_pipeline import AlignedDepthDataset, batch_depth
from synth_scenes import MIXED, label_agreement, make_dataset
from tests.trainer_tests import tiny_run
from trainer import Trainer, load_samples

CONFIG_PATH = os.path.join(
    os.path.dirname(os.path.abspath(__file__)), '..', 'configs', 'toy.json'
)

ENABLED = os.environ.get('RANGEDEPTH_ACCEPTANCE', '0') == '1'


def train_toy(output_dir, logger, **overrides):
    config = RunConfig.load(CONFIG_PATH).with_overrides(
        dict(overrides, output_dir=output_dir)
    )
    samples = load_samples(config, logger)
    result = Trainer(config, logger).train(samples=samples)
    model, _ = load_checkpoint(result['checkpoint'], config.model_config())
    model.to(config.device()).eval()
    summary = evaluate_samples(
        model, samples[1], config.fov_spec(), config.range_domains(),
        config.eval_cap, config.device(), config.rd_percentile,
        collect_bins=True, logger=logger
    )
    return config, summary


@unittest.skipUnless(ENABLED, "set RANGEDEPTH_ACCEPTANCE=1 to run toy training")
class ToyTrainingTestCase(unittest.TestCase):
    """Acceptance runs on the synthetic toy dataset"""

    @classmethod
    def setUpClass(cls):
        cls.tmpdir = tempfile.TemporaryDirectory()
        cls.logger = logging.getLogger('acceptance')
        cls.config, cls.variation = train_toy(
            os.path.join(cls.tmpdir.name, 'variation'), cls.logger
        )
        _, cls.width = train_toy(
            os.path.join(cls.tmpdir.name, 'width'), cls.logger, bin_type='width'
        )

    @classmethod
    def tearDownClass(cls):
        cls.tmpdir.cleanup()

    def test_held_out_quality(self):
        all_row = self.variation.rows()['all']
        self.assertGreaterEqual(self.variation.rd_accuracy, 0.90)
        self.assertGreaterEqual(all_row.delta1, 0.70)
        self.assertLessEqual(all_row.rel, 0.20)

    def test_short_range_uses_bin_prefix(self):
        near = self.variation.mean_peak_index(1)
        far = self.variation.mean_peak_index(self.config.k_domains)
        self.assertIsNotNone(near)
        self.assertIsNotNone(far)
        self.assertLess(near, far)

    def test_variation_bins_reduce_ambiguity(self):
        self.assertGreater(
            self.variation.rank_correlation(), self.width.rank_correlation()
        )


@unittest.skipUnless(ENABLED, "set RANGEDEPTH_ACCEPTANCE=1 to run toy training")
class HeadVariantTestCase(unittest.TestCase):
    """Shared FFN head against the K-FFN variants over three seeds"""

    def test_shared_ffn_rmse(self):
        logger = logging.getLogger('acceptance')
        rmse = {}
        with tempfile.TemporaryDirectory() as tmpdir:
            for variant in (SHARED_FFN, ONE_QUERY_K_FFN, K_QUERY_K_FFN):
                values = []
                for seed in (0, 1, 2):
                    _, summary = train_toy(
                        os.path.join(tmpdir, '%s_%d' % (variant, seed)), logger,
                        head_variant=variant, seed=seed
                    )
                    values.append(summary.rows()['all'].rmse)
                rmse[variant] = float(np.mean(values))
        self.assertLessEqual(rmse[SHARED_FFN], rmse[ONE_QUERY_K_FFN])
        self.assertLessEqual(rmse[SHARED_FFN], rmse[K_QUERY_K_FFN])


@unittest.skipUnless(ENABLED, "set RANGEDEPTH_ACCEPTANCE=1 to run toy training")
class GeneratorLearnabilityTestCase(unittest.TestCase):
    """A per-pixel regressor recovers depth from synthetic colors"""

    def stack(self, samples):
        images, depths, valid = [], [], []
        for sample in samples:
            images.append(torch.from_numpy(sample.rgb).permute(2, 0, 1).float() / 255.0)
            depths.append(torch.from_numpy(sample.depth.depth))
            valid.append(torch.from_numpy(sample.depth.valid))
        return torch.stack(images), torch.stack(depths), torch.stack(valid)

    def test_per_pixel_regressor(self):
        torch.manual_seed(0)
        config = RunConfig({'synth_image_h': 48, 'synth_image_w': 64})
        data = make_dataset(config.synth_template(), 550, test_fraction=50 / 550.0)
        images, depths, valid = self.stack(data.train)

        regressor = nn.Sequential(
            nn.Conv2d(3, 32, 1), nn.ReLU(),
            nn.Conv2d(32, 32, 1), nn.ReLU(),
            nn.Conv2d(32, 1, 1)
        )
        optimizer = torch.optim.Adam(regressor.parameters(), lr=1e-2)
        for step in range(1500):
            index = torch.randint(0, images.shape[0], (32,))
            log_pred = regressor(images[index])[:, 0]
            mask = valid[index]
            target = torch.log(depths[index].clamp_min(1e-3))
            loss = ((log_pred - target)[mask] ** 2).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        test_images, test_depths, test_valid = self.stack(data.test)
        with torch.no_grad():
            pred = torch.exp(regressor(test_images)[:, 0])
        record = compute_metrics(
            DepthMap(pred.numpy(), np.ones(pred.shape, dtype=bool)),
            DepthMap(test_depths.numpy(), test_valid.numpy())
        )
        self.assertLess(record.rel, 0.15)


@unittest.skipUnless(ENABLED, "set RANGEDEPTH_ACCEPTANCE=1 to run long generator checks")
class GeneratorStatisticsTestCase(unittest.TestCase):
    """Label agreement and domain proportions of large synthetic sets"""

    def setUp(self):
        self.template = RunConfig({'synth_image_h': 48, 'synth_image_w': 64}).synth_template()

    def test_label_agreement(self):
        self.assertEqual(self.template.rd_index, MIXED)
        self.assertGreaterEqual(label_agreement(self.template, range(1000)), 0.99)

    def test_domain_proportions(self):
        mix = [0.4, 0.3, 0.2, 0.1]
        dataset = make_dataset(self.template, 10000, mix)
        labels = [k for _, k in dataset.train_specs + dataset.test_specs]
        self.assertEqual(len(labels), 10000)
        for k, share in enumerate(mix, start=1):
            self.assertAlmostEqual(labels.count(k) / 10000.0, share, delta=0.02)


@unittest.skipUnless(ENABLED, "set RANGEDEPTH_ACCEPTANCE=1 to run toy training")
class TrainabilityTestCase(unittest.TestCase):
    """A small model fits a fixed batch"""

    def test_loss_halves_in_200_steps(self):
        torch.manual_seed(0)
        config = tiny_run('unused')
        samples = make_dataset(config.synth_template(), 4, test_fraction=0.0).train
        dataset = AlignedDepthDataset(samples, config.fov_spec(), config.range_domains())
        images, gt, labels, _ = batch_depth(next(iter(DataLoader(dataset, batch_size=4))))

        model = DepthModel(config.model_config())
        optimizer = torch.optim.AdamW(model.parameters(), lr=1e-3)
        losses = []
        for step in range(200):
            breakdown = total_loss(
                model(images), gt, labels, config.loss_weights(),
                chamfer_cap=config.chamfer_cap, chamfer_reduction=config.chamfer_reduction
            )
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
            losses.append(float(breakdown.total))
        self.assertLessEqual(np.mean(losses[-10:]), 0.5 * losses[0])
