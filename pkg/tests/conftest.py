import numpy as np
import pytest

from mmevent.core import load_manifest
from mmevent.fusion import FusionConfig, init_params
from mmevent.synthetic import make_cue_dataset

SMALL = FusionConfig(d_text=8, d_vision=8, d_attn=4, d_model=8, n_chunks=4)


@pytest.fixture(scope="session")
def cue_manifest_path(tmp_path_factory):
    return make_cue_dataset(tmp_path_factory.mktemp("cue"), n_train=1200, n_test=300, seed=0)


@pytest.fixture(scope="session")
def small_cue_manifest_path(tmp_path_factory):
    return make_cue_dataset(tmp_path_factory.mktemp("cue_small"), n_train=240, n_test=60, seed=3)


@pytest.fixture(scope="session")
def small_cue_manifest(small_cue_manifest_path):
    return load_manifest(small_cue_manifest_path)


def random_params(head, cfg=SMALL, seed=0, scale=1.0):
    """Params drawn at init scale with nonzero biases."""
    p = init_params(head, cfg, seed)
    rng = np.random.default_rng(seed + 10_000)
    for k, t in p.tensors.items():
        if t.ndim == 1:
            p.tensors[k] = rng.normal(0, 0.5, t.shape)
        else:
            p.tensors[k] = t * scale
    return p


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES):
            terminalreporter.write_line(line)
