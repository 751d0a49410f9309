import json
import logging
import os
import tempfile
import unittest

import cv2
import numpy as np

from depth_service import (
    DepthService, collect_sweep_rows, range_domain_rows, write_ablation_csv
)
from eval_metrics import MetricRecord, mri_theta, write_metrics_report
from figures import (
    FigureWriter, read_curves_csv, read_k_sweep_csv, read_matrix_csv
)
from rgbd_samples import read_depth_raster
from run_config import RunConfig
from synth_scenes import synth_scene
from tests.trainer_tests import tiny_run
from trainer import CONFIG_ECHO_NAME
from translator import Translator


def record(rmse, delta1=0.8):
    return MetricRecord(delta1, 0.9, 0.95, 0.2, rmse, 0.08, 0.3, 0.25, 100)


class PartitionCommandTestCase(unittest.TestCase):
    """Test case for the partition command"""

    def setUp(self):
        logger = logging.getLogger('test')
        self.service = DepthService(logger, Translator(logger=logger))

    def test_tables(self):
        result = self.service.partition(RunConfig({'k_domains': 3, 'z_min': 1, 'z_max': 13}))
        self.assertEqual(result['k_domains'], 3)
        intervals = [row['interval'] for row in result['space_increasing']]
        self.assertEqual(intervals, [[1.0, 3.0], [1.0, 7.0], [1.0, 13.0]])
        buckets = [row['bucket'] for row in result['space_increasing']]
        self.assertEqual(buckets, [[1.0, 3.0], [3.0, 7.0], [7.0, 13.0]])
        self.assertEqual(len(result['uniform']), 3)
        self.assertEqual(result['uniform'][0]['k'], 1)


class DepthServiceTestCase(unittest.TestCase):
    """Test case for the train, eval, predict and figures commands"""

    @classmethod
    def setUpClass(cls):
        cls.tmpdir = tempfile.TemporaryDirectory()
        cls.logger = logging.getLogger('test')
        cls.service = DepthService(cls.logger, Translator(logger=cls.logger), 'cpu')
        cls.config = tiny_run(os.path.join(cls.tmpdir.name, 'run'), epochs=1)
        cls.train_result = cls.service.train(cls.config)

    @classmethod
    def tearDownClass(cls):
        cls.tmpdir.cleanup()

    def path(self, *parts):
        return os.path.join(self.tmpdir.name, *parts)

    def test_train_result(self):
        self.assertNotIn('error', self.train_result)
        self.assertNotIn('model', self.train_result)
        self.assertTrue(os.path.isfile(self.train_result['checkpoint']))
        self.assertEqual(self.train_result['epochs'], 1)

    def test_evaluate(self):
        result = self.service.evaluate(
            self.train_result['checkpoint'], output_dir=self.path('eval')
        )
        self.assertNotIn('error', result)
        self.assertTrue(os.path.isfile(result['report']))
        self.assertTrue(os.path.isfile(self.path('eval', 'eval_report.txt')))
        self.assertIn('all', result['rows'])
        self.assertIn('dataset.synth', result['rows'])
        self.assertEqual(result['split'], 'test')

        with open(result['report']) as fh:
            report = json.load(fh)
        self.assertEqual(report['rows']['all'], result['rows']['all'])

    def test_evaluate_with_baseline(self):
        stem = self.path('baseline')
        write_metrics_report(stem, {'all': record(2.0), 'dataset.synth': record(2.0)})
        result = self.service.evaluate(
            self.train_result['checkpoint'], baseline=stem + '.json',
            output_dir=self.path('eval_baseline')
        )
        self.assertNotIn('error', result)
        expected = mri_theta(result['rows']['all'], record(2.0))
        self.assertAlmostEqual(result['mri_theta'], expected)
        rmse = result['rows']['dataset.synth']['rmse']
        self.assertAlmostEqual(result['mri_eta'], 100.0 * (2.0 - rmse) / 2.0)

    def test_evaluate_errors(self):
        result = self.service.evaluate(self.path('missing.pt'))
        self.assertEqual(result['error_code'], 1)
        self.assertEqual(result['error'], Translator().tr("error.checkpoint_invalid"))

        result = self.service.evaluate(self.train_result['checkpoint'], split='val')
        self.assertEqual(result['error_code'], 1)

        result = self.service.evaluate(
            self.train_result['checkpoint'], baseline=self.path('nothing.json'),
            output_dir=self.path('eval_error')
        )
        self.assertEqual(result['error_code'], 1)

        other = tiny_run(self.path('other'), n_bins=16)
        result = self.service.evaluate(self.train_result['checkpoint'], other)
        self.assertEqual(result['error_code'], 1)

    def test_predict(self):
        sample = synth_scene(self.config.synth_template())
        image_path = self.path('scene.png')
        cv2.imwrite(image_path, cv2.cvtColor(sample.rgb, cv2.COLOR_RGB2BGR))
        intr = sample.intrinsics

        result = self.service.predict(
            self.train_result['checkpoint'], image_path, intr.fx, intr.fy,
            output_dir=self.path('predict')
        )
        self.assertNotIn('error', result)
        self.assertEqual(len(result['rd_probabilities']), 2)
        self.assertAlmostEqual(sum(result['rd_probabilities']), 1.0, places=5)
        self.assertTrue(os.path.isfile(result['preview']))
        with open(result['sidecar']) as fh:
            sidecar = json.load(fh)
        self.assertAlmostEqual(sidecar['fx'], intr.fx)
        self.assertEqual(sidecar['max_range'], 80.0)
        self.assertGreaterEqual(sidecar['depth_scale'], 1e-3)
        depth = read_depth_raster(result['depth_raster'], sidecar['depth_scale'])
        self.assertEqual(depth.depth.shape, (48, 64))

    def test_predict_errors(self):
        result = self.service.predict(
            self.train_result['checkpoint'], self.path('scene.png'), None, 100.0,
            output_dir=self.path('predict')
        )
        self.assertEqual(result['error_code'], 1)
        self.assertEqual(result['error'], Translator().tr("error.missing_intrinsics"))

        result = self.service.predict(
            self.train_result['checkpoint'], self.path('missing.png'), 60.0, 60.0,
            output_dir=self.path('predict')
        )
        self.assertEqual(result['error_code'], 1)

    def test_figures(self):
        sweep_dir = self.path('sweep')
        run_dir = os.path.join(sweep_dir, 'k2')
        os.makedirs(run_dir)
        os.makedirs(os.path.join(sweep_dir, 'k3'))
        self.config.save(os.path.join(run_dir, CONFIG_ECHO_NAME))
        write_metrics_report(os.path.join(run_dir, 'eval_report'), {'all': record(1.5)})

        result = self.service.figures(
            self.train_result['checkpoint'], output_dir=self.path('figures'),
            sweep_dir=sweep_dir, n_images=1, sequence_length=3
        )
        self.assertNotIn('error', result)
        names = {os.path.basename(p) for p in result['figures']}
        for name in ('bin_centers', 'occupancy_variation', 'per_frame_rmse', 'k_sweep'):
            self.assertIn(name + '.png', names)
            self.assertIn(name + '.csv', names)
        self.assertEqual(len(result['warnings']), 2)
        self.assertTrue(any('k3' in warning for warning in result['warnings']))

        curves = read_curves_csv(self.path('figures', 'bin_centers.csv'))
        self.assertEqual(len(curves), 2)
        for centers in curves.values():
            self.assertEqual(len(centers), 8)
        matrix, edges = read_matrix_csv(self.path('figures', 'occupancy_variation.csv'))
        self.assertEqual(matrix.shape[1], 8)
        self.assertEqual(len(edges), matrix.shape[0] + 1)
        self.assertEqual(read_k_sweep_csv(self.path('figures', 'k_sweep.csv')), [
            {'name': 'k2', 'k': 2, 'partition': 'space_increasing',
             'delta1': 0.8, 'rmse': 1.5}
        ])

    def test_figures_without_sweep_dir(self):
        missing = self.path('no_sweep')
        result = self.service.figures(
            self.train_result['checkpoint'], output_dir=self.path('figures_no_sweep'),
            sweep_dir=missing, n_images=1, sequence_length=2
        )
        self.assertNotIn('error', result)
        names = {os.path.basename(p) for p in result['figures']}
        self.assertIn('per_frame_rmse.png', names)
        self.assertNotIn('k_sweep.png', names)
        self.assertTrue(any(missing in warning for warning in result['warnings']))


class SweepOutputTestCase(unittest.TestCase):
    """Test case for sweep and ablation tables"""

    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.root = self.tmpdir.name

    def tearDown(self):
        self.tmpdir.cleanup()

    def test_collect_sweep_rows(self):
        for name, k, rmse in (('k1', 1, 3.0), ('k4_uniform', 4, 2.0)):
            run_dir = os.path.join(self.root, name)
            os.makedirs(run_dir)
            partition = 'uniform' if 'uniform' in name else 'space_increasing'
            RunConfig({'k_domains': k, 'partition': partition}).save(
                os.path.join(run_dir, CONFIG_ECHO_NAME)
            )
            write_metrics_report(os.path.join(run_dir, 'eval_report'), {'all': record(rmse)})
        os.makedirs(os.path.join(self.root, 'k2'))
        with open(os.path.join(self.root, 'notes.txt'), 'w') as fh:
            fh.write("not a run")

        rows, missing = collect_sweep_rows(self.root)
        self.assertEqual(missing, ['k2'])
        self.assertEqual([row['name'] for row in rows], ['k1', 'k4_uniform'])
        self.assertEqual(rows[1]['partition'], 'uniform')
        self.assertEqual(rows[1]['k'], 4)
        self.assertEqual(rows[0]['rmse'], 3.0)

    def test_range_domain_rows(self):
        rows = {'all': 0, 'dataset.synth': 0, 'rd2': 0, 'rd1': 0, 'rd_accuracy': 0}
        self.assertEqual(range_domain_rows(rows), ['rd1', 'rd2'])

    def test_ablation_csv(self):
        path = os.path.join(self.root, 'ablation.csv')
        rows = [
            {'name': 'full', 'rmse': {'rd1': 0.5, 'rd2': 1.5}, 'mri_eta': 12.5},
            {'name': 'baseline', 'rmse': {'rd1': 0.6}, 'mri_eta': 0.0},
        ]
        write_ablation_csv(path, rows, ['rd1', 'rd2'])
        with open(path) as fh:
            lines = fh.read().splitlines()
        self.assertEqual(lines, [
            'name,rmse.rd1,rmse.rd2,mri_eta',
            'full,0.5,1.5,12.5',
            'baseline,0.6,,0.0',
        ])

    def test_figure_writer(self):
        writer = FigureWriter(os.path.join(self.root, 'figs'), logging.getLogger('test'))
        matrix = np.array([[0.25, 0.75], [0.0, 0.0], [1.0, 0.0]])
        paths = writer.occupancy_heatmap(matrix, [0.0, 1.0, 2.0, 3.0], 'occupancy')
        self.assertTrue(all(os.path.isfile(p) for p in paths))
        restored, edges = read_matrix_csv(paths[1])
        self.assertTrue(np.array_equal(restored, matrix))
        self.assertEqual(edges.tolist(), [0.0, 1.0, 2.0, 3.0])

        paths = writer.bin_center_curves({'a': [1.0, 2.0, 4.0], 'b': [0.5, 1.0]})
        self.assertEqual(read_curves_csv(paths[1]), {'a': [1.0, 2.0, 4.0], 'b': [0.5, 1.0]})
