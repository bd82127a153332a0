import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cov3d.data import VolumeDataset  # noqa: E402
from cov3d.synth import generate_scan  # noqa: E402
from cov3d.volume import Volume, normalize_intensity, prune_non_lung, resize_trilinear  # noqa: E402
from acceptance_log import ACCEPTANCE  # noqa: E402


def make_dataset(n, seed=0, shape=(16, 32, 32), raw_size=(32, 48, 48), split=0):
    """Balanced in-memory dataset of preprocessed synthetic scans."""
    labels = [i % 2 for i in range(n)]
    vols = []
    for i, label in enumerate(labels):
        scan = generate_scan(seed, label, raw_size, split=split, index=i)
        v = normalize_intensity(Volume(scan.raw.astype(np.float32), "raw", f"s{i}"))
        v, _ = prune_non_lung(v)
        vols.append(resize_trilinear(v, shape))
    return VolumeDataset(vols, labels)


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(6, seed=11)


# -- acceptance verdicts ------------------------------------------------------
def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid or report.when != "call" or report.nodeid in ACCEPTANCE:
        return
    if report.failed:
        ACCEPTANCE[report.nodeid] = f"FAIL  {report.nodeid.split('::')[-1]}: raised before a verdict was recorded"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE.values():
            terminalreporter.write_line(line)
