import io
import json
import logging
import os
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout

from cli import EXIT_OK, EXIT_USER_ERROR, build_parser, format_partition, load_config, main
from depth_service import DepthService
from tests.trainer_tests import tiny_run
from translator import Translator


def run_main(argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


class CliTestCase(unittest.TestCase):
    """Test case for the command line interface"""

    def run_main(self, argv):
        return run_main(argv)

    def test_partition(self):
        code, out, _ = self.run_main([
            'partition', '--set', 'k_domains=3', '--set', 'z_min=1', '--set', 'z_max=13'
        ])
        self.assertEqual(code, EXIT_OK)
        lines = out.splitlines()
        self.assertEqual(lines[0], "z_min=1 z_max=13 K=3")
        self.assertIn("space_increasing", lines)
        self.assertIn("uniform", lines)
        self.assertIn("  3  [   1.0000,   13.0000]  (   7.0000,   13.0000]", lines)

    def test_invalid_override(self):
        code, _, err = self.run_main(['partition', '--set', 'k_domains=0'])
        self.assertEqual(code, EXIT_USER_ERROR)
        self.assertIn('"error_code": 1', err)

        code, _, _ = self.run_main(['partition', '--set', 'k_domains'])
        self.assertEqual(code, EXIT_USER_ERROR)

    def test_missing_config_file(self):
        code, _, _ = self.run_main(['partition', '--config', '/nonexistent/run.json'])
        self.assertEqual(code, EXIT_USER_ERROR)

    def test_bad_arguments(self):
        for argv in ([], ['unknown'], ['eval'], ['predict', 'model.pt']):
            with redirect_stderr(io.StringIO()):
                with self.assertRaises(SystemExit) as ctx:
                    main(argv)
            self.assertEqual(ctx.exception.code, EXIT_USER_ERROR, msg=argv)

    def test_service_error(self):
        code, _, err = self.run_main(['eval', '/nonexistent/checkpoint.pt'])
        self.assertEqual(code, EXIT_USER_ERROR)
        self.assertIn('"error_details"', err)

    def test_load_config(self):
        parser = build_parser()
        self.assertIsNone(load_config(parser.parse_args(['eval', 'model.pt'])))
        config = load_config(parser.parse_args(['train', '--seed', '7', '--set', 'n_bins=64']))
        self.assertEqual((config.seed, config.n_bins), (7, 64))
        args = parser.parse_args(['ablate', '--rows', 'full', 'one_query_k_ffn'])
        self.assertEqual(args.rows, ['full', 'one_query_k_ffn'])

    def test_format_partition(self):
        row = {'k': 1, 'interval': [0.0, 2.5], 'bucket': [0.0, 2.5]}
        text = format_partition({
            'z_min': 0.0, 'z_max': 2.5, 'k_domains': 1,
            'space_increasing': [row], 'uniform': [row]
        })
        self.assertEqual(text.splitlines()[0], "z_min=0.0 z_max=2.5 K=1")
        self.assertEqual(text.count("[   0.0000,    2.5000]"), 2)


class CheckpointCommandTestCase(unittest.TestCase):
    """Test case for checkpoint commands with config overrides"""

    @classmethod
    def setUpClass(cls):
        cls.tmpdir = tempfile.TemporaryDirectory()
        logger = logging.getLogger('test')
        service = DepthService(logger, Translator(logger=logger), 'cpu')
        config = tiny_run(os.path.join(cls.tmpdir.name, 'run'), epochs=1)
        cls.checkpoint = service.train(config)['checkpoint']

    @classmethod
    def tearDownClass(cls):
        cls.tmpdir.cleanup()

    def test_seed_keeps_checkpoint_config(self):
        args = build_parser().parse_args(['eval', self.checkpoint, '--seed', '3'])
        config = load_config(args)
        self.assertEqual((config.seed, config.n_bins, config.k_domains), (3, 8, 2))

    def test_eval_with_seed(self):
        output_dir = os.path.join(self.tmpdir.name, 'eval')
        code, out, _ = run_main([
            'eval', self.checkpoint, '--seed', '1', '--device', 'cpu',
            '--output-dir', output_dir
        ])
        self.assertEqual(code, EXIT_OK)
        self.assertIn('all', json.loads(out)['rows'])
        self.assertTrue(os.path.isfile(os.path.join(output_dir, 'eval_report.json')))

    def test_override_of_missing_checkpoint(self):
        code, _, err = run_main([
            'eval', os.path.join(self.tmpdir.name, 'missing.pt'), '--seed', '1'
        ])
        self.assertEqual(code, EXIT_USER_ERROR)
        self.assertIn('"error_code": 1', err)
