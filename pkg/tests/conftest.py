import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _synth import toy_dataset  # noqa: E402

import sst.models as models  # noqa: E402
from sst.patches import PatchSpec  # noqa: E402


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """Six-image KITTI-layout dataset (two per category, all with gt)."""
    root = tmp_path_factory.mktemp("toy-kitti")
    toy_dataset(root)
    return root


@pytest.fixture(scope="session")
def tiny_classifier(toy_root):
    """A quickly trained small-patch street classifier (n=11, 2 epochs)."""
    import sst.dataset as dataset

    descriptor = models.builtin_classification(patch_size=11)
    descriptor.hyperparameters.update(epochs=2, learning_rate=0.05, seed=3)
    images = dataset.load_dataset(toy_root)
    spec = PatchSpec(n=11, stride=7, fully=False)
    return models.train(descriptor, images, spec)


@pytest.fixture(scope="session")
def tiny_regressor():
    """An initialized (epochs=0) small-patch regression model."""
    descriptor = models.builtin_regression(patch_size=9)
    descriptor.hyperparameters.update(epochs=0, seed=5)
    return models.train(descriptor, [], PatchSpec(n=9, stride=4, fully=True))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
