"""Small shared builders for the training and acceptance tests."""
import numpy as np

from trigan.data import LabeledBatch, SyntheticSpec, make_synthetic
from trigan.harness.config import ExperimentConfig
from trigan.training import build_run


def tiny_config(**kw):
    base = dict(image_size=32, base_width=4, latent_dim=16, batch_size=10, epochs=1, n_train=20, seed=0)
    base.update(kw)
    return ExperimentConfig(**base).validate()


def tiny_batch(seed=0, n=10):
    ds = make_synthetic(SyntheticSpec(image_size=32, n_per_class=n // 2, seed=seed))
    order = np.random.default_rng(seed).permutation(n)
    return LabeledBatch(ds.images[order], ds.labels[order], order)


def tiny_run(**kw):
    cfg = tiny_config(**kw)
    return cfg, build_run(cfg, 2)


def snapshot(net):
    return {k: p.data.copy() for k, p in net.named_parameters().items()}


def same(a, b):
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)
