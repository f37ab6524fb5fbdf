import numpy as np
import pytest

from cambench.bench import RunConfig
from cambench.dataset import patient_split, synth_dataset, write_manifest
from cambench.modelio import build_toy_detector, save_network


@pytest.fixture(scope="session")
def toy_net():
    return build_toy_detector(0)


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory, toy_net):
    """A small synthetic dataset plus the saved toy model, shared read-only."""
    root = tmp_path_factory.mktemp("mini")
    records = synth_dataset(12, 10, 0, root)
    records = patient_split(records, 0.2, 0)
    write_manifest(root / "manifest.csv", records)
    save_network(toy_net, root / "toy.netspec", root / "toy.camw")
    return root


@pytest.fixture()
def mini_config(mini_dataset):
    return RunConfig(
        spec_path=str(mini_dataset / "toy.netspec"),
        weights_path=str(mini_dataset / "toy.camw"),
        manifest_path=str(mini_dataset / "manifest.csv"),
        jobs=2,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
