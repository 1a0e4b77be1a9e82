import numpy as np
import pytest

from advcbir.harness.dataset import SynthSpec, build_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """3 classes x 3 views + 6 distractors at 64 px, shared across harness tests."""
    root = tmp_path_factory.mktemp("tinyds")
    spec = SynthSpec(classes=3, views_per_class=3, distractors=6, image_size=64,
                     junk_per_query=1)
    manifest = build_synthetic_dataset(spec, seed=101, out_dir=root)
    return manifest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_image(rng, h=32, w=32):
    return rng.uniform(0.0, 1.0, size=(h, w, 3))
