import numpy as np
import pytest

from mibag.bagstore import Bag, Dataset


def make_bag(rng, m, d, bag_id="bag", label=None, grid=None):
    emb = rng.uniform(-1.0, 1.0, size=(m, d)).astype(np.float32)
    return Bag(id=bag_id, embeddings=emb, grid=grid, label=label)


def make_dataset(rng, n, m, d, labels=None, n_reference=0):
    bags = tuple(
        make_bag(rng, m, d, bag_id=f"b{i}", label=labels[i] if labels else None)
        for i in range(n)
    )
    refs = tuple(make_bag(rng, m, d, bag_id=f"r{i}") for i in range(n_reference))
    return Dataset(bags=bags, reference_bags=refs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
