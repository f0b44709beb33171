"""Shared builders for small deterministic test fixtures."""

import numpy as np
import pytest

from heteroadapt.model import (
    ClassifierParams,
    DiscriminatorParams,
    ModelParams,
    TaskBatch,
    TransformerParams,
)
from heteroadapt.numerics import Tensor


def make_transformer(rng, d_in, hidden, d_c, scale=0.8):
    return TransformerParams(
        Tensor(rng.uniform(-scale, scale, (d_in, hidden))),
        Tensor(rng.uniform(-0.2, 0.2, hidden)),
        Tensor(rng.uniform(-scale, scale, (hidden, d_c))),
        Tensor(rng.uniform(-0.2, 0.2, d_c)),
    )


def make_params(rng, source_dims, target_dim, hidden=4, d_c=4, num_classes=2, tied=False):
    target = make_transformer(rng, target_dim, hidden, d_c)
    if tied:
        sources = tuple(
            TransformerParams(
                Tensor(rng.uniform(-0.8, 0.8, (d, hidden))),
                Tensor(rng.uniform(-0.2, 0.2, hidden)),
                target.w2,
                target.b2,
            )
            for d in source_dims
        )
    else:
        sources = tuple(make_transformer(rng, d, hidden, d_c) for d in source_dims)
    classifier = ClassifierParams(
        Tensor(rng.uniform(-0.8, 0.8, (d_c, num_classes))),
        Tensor(rng.uniform(-0.2, 0.2, num_classes)),
    )
    disc = DiscriminatorParams(
        Tensor(rng.uniform(-0.8, 0.8, (d_c, d_c))),
        Tensor(rng.uniform(-0.2, 0.2, d_c)),
        Tensor(rng.uniform(-0.8, 0.8, (d_c, 2))),
        Tensor(rng.uniform(-0.2, 0.2, 2)),
    )
    return ModelParams(sources, target, classifier, disc, tied_second=tied)


def make_toy_batch(rng, source_dims=(3, 5), target_dim=4, num_classes=2,
                   per_source=4, labeled=2, unlabeled=3):
    """A tiny two-source task; every domain covers every class."""
    source_x, source_y = [], []
    for d in source_dims:
        x = rng.uniform(-1.5, 1.5, (per_source, d))
        y = np.arange(per_source) % num_classes
        source_x.append(Tensor(x))
        source_y.append(y)
    lab_x = Tensor(rng.uniform(-1.5, 1.5, (labeled, target_dim)))
    lab_y = np.arange(labeled) % num_classes
    unlab_x = Tensor(rng.uniform(-1.5, 1.5, (unlabeled, target_dim))) if unlabeled else None
    return TaskBatch(
        tuple(source_x), tuple(source_y), lab_x, lab_y, unlab_x, num_classes
    )


@pytest.fixture
def toy_setup():
    rng = np.random.default_rng(42)
    batch = make_toy_batch(rng)
    params = make_params(rng, (3, 5), 4)
    return params, batch
