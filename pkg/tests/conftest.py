import numpy as np
import pytest

from digit_ensemble import _kernels
from digit_ensemble.synth import write_synth_corpus


@pytest.fixture(params=_kernels.BACKENDS)
def backend(request):
    """Run the test once per kernel backend."""
    with _kernels.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """10 classes x 6 clips of the tone corpus."""
    root = tmp_path_factory.mktemp("small_corpus")
    write_synth_corpus(root, classes=10, per_class=6, seed=3)
    return root


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """The full 300-clip tone corpus used by the acceptance gate."""
    root = tmp_path_factory.mktemp("synth_corpus")
    write_synth_corpus(root, classes=10, per_class=30, seed=0)
    return root
