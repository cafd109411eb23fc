import numpy as np
import pytest

from rise3d import backbone as bb
from rise3d import datasets as ds
from rise3d.geometry import MolecularGraph, build_dpg

CC_BOND = 1.530
CH_BOND = 1.095
TETRAHEDRAL_DEG = 109.471

ETHANE_BONDS = {(0, 1), (0, 2), (0, 3), (0, 4), (1, 5), (1, 6), (1, 7)}


def make_ethane(cutoff: float = 5.0) -> MolecularGraph:
    """Staggered ethane with C-C 1.530 and C-H 1.095 angstroms."""
    theta = np.deg2rad(TETRAHEDRAL_DEG)
    z = CH_BOND * np.cos(theta)
    rxy = CH_BOND * np.sin(theta)
    positions = [[0.0, 0.0, 0.0], [0.0, 0.0, CC_BOND]]
    for phi in (0.0, 120.0, 240.0):
        a = np.deg2rad(phi)
        positions.append([rxy * np.cos(a), rxy * np.sin(a), z])
    for phi in (60.0, 180.0, 300.0):
        a = np.deg2rad(phi)
        positions.append([rxy * np.cos(a), rxy * np.sin(a), CC_BOND - z])
    labels = ["C", "C", "H", "H", "H", "H", "H", "H"]
    return MolecularGraph(
        positions=np.asarray(positions),
        construction_radii=np.full(8, cutoff),
        node_features=ds.one_hot_features(labels),
        atom_labels=labels,
        bond_truth=set(ETHANE_BONDS),
    )


@pytest.fixture(scope="session")
def ethane() -> MolecularGraph:
    return make_ethane()


@pytest.fixture(scope="session")
def small_corpus():
    return ds.generate_synthetic_corpus(ds.SyntheticCorpusConfig(count=50, seed=5))


@pytest.fixture(scope="session")
def small_model(small_corpus):
    """A quickly trained backbone for explainer and evaluation tests."""
    result = bb.train(small_corpus, bb.TrainConfig(epochs=300, lr=5e-3, seed=0,
                                                   patience=120))
    return result.params


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained random weights where only gradients and shapes matter."""
    return bb.init_params(ds.DEFAULT_ELEMENTS, cutoff=5.0, seed=12)


def edges_of(graph):
    return build_dpg(graph, graph.construction_radii)
