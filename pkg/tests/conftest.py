import dataclasses

import numpy as np
import pytest

from mmgl.config import Config
from mmgl.phantom import write_phantom_dataset
from mmgl.data import prepare_slice, slice_volume, load_manifest_volumes


@pytest.fixture(scope="session")
def tiny_ds_dir(tmp_path_factory):
    """Four 32-cubed phantoms with 3 structures; enough for pipeline tests."""
    root = tmp_path_factory.mktemp("tiny_phantoms")
    write_phantom_dataset(root, count=4, seed=5, shape=(32, 32, 32),
                          n_structures=3, noise_sigma=0.05)
    return root


@pytest.fixture(scope="session")
def tiny_cfg(tiny_ds_dir):
    cfg = Config()
    cfg.data = dataclasses.replace(
        cfg.data, manifest=str(tiny_ds_dir / "manifest.json"), labeled_fraction=0.5
    )
    return cfg


@pytest.fixture(scope="session")
def tiny_volumes(tiny_ds_dir):
    return load_manifest_volumes(tiny_ds_dir / "manifest.json")


@pytest.fixture()
def labeled_slice(tiny_volumes):
    """One 160x160 transaxial slice with its mask, from the middle of a phantom."""
    vol, lab = tiny_volumes[0]
    slices = slice_volume(vol, lab, "transaxial")
    return prepare_slice(slices[len(slices) // 2])


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
