import numpy as np
import pytest

from diffstage.graphs import RegionAtlas, WeightedGraph


@pytest.fixture
def atlas4():
    return RegionAtlas.from_names(
        ["ctx_lh_a", "ctx_lh_b", "ctx_rh_a", "ctx_rh_b"],
        ["left", "left", "right", "right"],
    )


@pytest.fixture
def atlas6():
    names = [
        "ctx_lh_bankssts",
        "ctx_lh_superiortemporal",
        "ctx_lh_inferiortemporal",
        "ctx_rh_bankssts",
        "ctx_rh_superiortemporal",
        "ctx_rh_inferiortemporal",
    ]
    return RegionAtlas.from_names(names)


def random_weighted(atlas, rng, sparsity=1.0):
    """Uniform(0,1) weights, zero diagonal, optionally sparsified."""
    d = atlas.count
    w = rng.random((d, d))
    if sparsity < 1.0:
        w *= rng.random((d, d)) < sparsity
    np.fill_diagonal(w, 0.0)
    return WeightedGraph(atlas, w)
