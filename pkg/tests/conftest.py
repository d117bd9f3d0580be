"""Shared fixtures: a small trained CNN reused by the slow end-to-end tests."""

import pytest

from kfeprune.checkpoint import network_bytes, network_from_bytes
from kfeprune.config import RunConfig
from kfeprune.pipeline import build_dataset, build_network
from kfeprune.training import train

CNN_SETTINGS = dict(
    arch="cnn:16,48",
    image="3x8x8",
    dataset="blobs",
    classes=4,
    n_train=256,
    n_test=128,
    sigma=1.1,
    epochs=6,
    lr=0.1,
    batch_size=32,
    finetune_epochs=4,
    finetune_lr=0.02,
    strategy="eigendamage",
    ratio=0.5,
    damping=1e-6,
    fisher_batches=0,
)


@pytest.fixture(scope="session")
def cnn_baseline():
    """Factory returning (cfg, fresh network, train set, test set) per seed.

    Training happens once per seed for the whole session; callers get an
    independent deserialized copy they may mutate freely.
    """
    cache = {}

    def get(seed: int):
        if seed not in cache:
            cfg = RunConfig(seed=seed, **CNN_SETTINGS)
            ds_train = build_dataset(cfg, "train")
            ds_test = build_dataset(cfg, "test")
            net = build_network(cfg, ds_train.num_classes)
            net, _ = train(
                net,
                ds_train,
                epochs=cfg.epochs,
                lr=cfg.lr,
                batch_size=cfg.batch_size,
                seed=cfg.seed,
            )
            cache[seed] = (cfg, network_bytes(net), ds_train, ds_test)
        cfg, blob, ds_train, ds_test = cache[seed]
        return cfg, network_from_bytes(blob), ds_train, ds_test

    return get
