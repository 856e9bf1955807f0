import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cogtraj.dataio import ScoreManifest, ScoreRange  # noqa: E402
from cogtraj.network import NetworkConfig  # noqa: E402


# Smallest network that still has every layer kind: used for whole-network
# finite-difference checks.
GRADCHECK_CONFIG = dict(
    input_shape=(1, 4, 4, 4),
    conv_channels=(1, 1, 1),
    conv_kernels=((3, 3, 3),) * 3,
    conv_strides=((1, 1, 1),) * 3,
    conv_padding=((1, 1, 1),) * 3,
    pool_windows=((2, 2, 2),) * 3,
    pool_strides=((1, 1, 1),) * 3,
    dropout_p=0.5,
    fc_widths=(4, 3, 2),
    output_dim=2,
    time_scale=36.0,
    dtype="float64",
)


@pytest.fixture
def gradcheck_config():
    return NetworkConfig.from_dict(GRADCHECK_CONFIG)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_manifest():
    return ScoreManifest([ScoreRange("a", 0.0, 10.0), ScoreRange("b", 1.0, 5.0),
                          ScoreRange("c", 0.0, 3.0)])


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""
    def record(number, title, passed, detail):
        ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}"
        print(ACCEPTANCE_LINES[number])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
