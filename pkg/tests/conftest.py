import pytest

from midpose.datasets import SynthConfig, load_dataset, load_samples, synth_generate
from midpose.silhouette import generate_dmasks


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth") / "ds"
    synth_generate(SynthConfig(n_samples=200, seed=0), root)
    return root


@pytest.fixture(scope="session")
def synth_data(synth_root):
    """(annotations, meshes, samples) of the shared 200-sample synthetic set."""
    anns, meshes = load_dataset(synth_root)
    return anns, meshes, load_samples(anns)


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_small") / "ds"
    synth_generate(SynthConfig(n_samples=10, seed=5), root)
    return root


@pytest.fixture(scope="session")
def dmask_library(synth_data):
    _, meshes, _ = synth_data
    return {mid: generate_dmasks(mesh) for mid, mesh in meshes.items()}
