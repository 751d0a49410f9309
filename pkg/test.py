import unittest

from tests.bincore_tests import *
from tests.domains_tests import *
from tests.fov_alignment_tests import *
from tests.depth_model_tests import *
from tests.objectives_tests import *
from tests.eval_metrics_tests import *
from tests.rgbd_samples_tests import *
from tests.synth_scenes_tests import *
from tests.run_config_tests import *
from tests.trainer_tests import *
from tests.depth_service_tests import *
from tests.cli_tests import *
from tests.translator_tests import *
# long toy training runs, skipped unless RANGEDEPTH_ACCEPTANCE=1
from tests.acceptance_tests import *


if __name__ == '__main__':
    # run all imported test cases
    unittest.main()
