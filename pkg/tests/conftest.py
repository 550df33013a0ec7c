"""Shared fixtures: one tiny synthetic scene reused by the fast unit tests.

The scene is generated once per session and written to disk once; tests that
need to corrupt files copy the directory first.  Everything here is small on
purpose (32x32 images, 6 views) so the whole unit suite stays interactive.
"""

import shutil

import numpy as np
import pytest

from poseforge.config import RunConfig
from poseforge.data import write_dataset
from poseforge.scene import generate_scene

TINY_SEED = 7
TINY_CLASSES = 3
TINY_VIEWS = 6
TINY_RES = (32, 32)


@pytest.fixture(scope="session")
def tiny_scene():
    scene, samples = generate_scene(
        seed=TINY_SEED, n_classes=TINY_CLASSES, n_views=TINY_VIEWS, resolution=TINY_RES
    )
    return scene, samples


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_scene):
    scene, samples = tiny_scene
    root = tmp_path_factory.mktemp("tiny_dataset")
    write_dataset(root, scene, samples)
    return root


@pytest.fixture()
def tiny_dataset_copy(tmp_path, tiny_dataset_dir):
    """A private copy tests may mutate or corrupt freely."""
    dst = tmp_path / "dataset"
    shutil.copytree(tiny_dataset_dir, dst)
    return dst


def small_run_config(**extra) -> RunConfig:
    """Desk-scale-but-smaller config for unit tests that touch the models."""
    overrides = {
        "d_model": 16,
        "height": 32,
        "width": 32,
        "field_pe": 2,
        "field_hidden": 16,
        "field_layers": 2,
        "n_samples": 8,
        "ray_batch": 32,
        "render_stride": 8,
        "split_ratio": 0.0,
        "early_stop": 0,
    }
    overrides.update(extra)
    return RunConfig(overrides)


@pytest.fixture()
def small_cfg():
    return small_run_config()


@pytest.fixture(scope="session")
def rng_factory():
    def make(seed: int) -> np.random.Generator:
        return np.random.default_rng(seed)

    return make
