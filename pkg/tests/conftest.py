"""Session fixtures: one toy dataset and one set of trained models.

Training happens once per pytest session and is shared by every test
that needs a trained codec / feature net / diffusion model. Budgets are
sized for a small CPU box; the full suite (acceptance included) is a
coffee-break run, not a seconds run.
"""

import numpy as np
import pytest

from desksr.harness.manifest import extract_patches, ingest
from desksr.harness.toydata import generate_toy_dataset

DATASET_SEED = 0
DATASET_COUNT = 240


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    generate_toy_dataset(root, count=DATASET_COUNT, seed=DATASET_SEED, size=96)
    return root


@pytest.fixture(scope="session")
def manifest(toy_root):
    return ingest(toy_root, seed=1)


@pytest.fixture(scope="session")
def val_patches(manifest):
    rng = np.random.default_rng(0)
    return [p for p, _ in extract_patches(manifest, 64, 0, rng, split="val")]


@pytest.fixture(scope="session")
def sched():
    from desksr.diffusion import make_schedule

    return make_schedule(1000)


@pytest.fixture(scope="session")
def trained_codec(manifest, tmp_path_factory):
    from desksr.codec import train_codec

    out = tmp_path_factory.mktemp("codec")
    codec, history = train_codec(manifest, out_dir=out, steps=4000, batch=8,
                                 lr=2e-3, seed=0, patch_count=2000)
    return codec, history


@pytest.fixture(scope="session")
def trained_featnet(manifest, tmp_path_factory):
    from desksr.features import train_feature_net

    out = tmp_path_factory.mktemp("features")
    net, history = train_feature_net(manifest, out_dir=out, steps=1000,
                                     batch=16, lr=5e-4, seed=0)
    return net, history


@pytest.fixture(scope="session")
def trained_fm(manifest, trained_codec, trained_featnet, sched, tmp_path_factory):
    from desksr.diffusion import FMTrainConfig, UNetConfig, train_fm

    codec, _ = trained_codec
    featnet, _ = trained_featnet
    out = tmp_path_factory.mktemp("fm")
    model, ema, history = train_fm(
        manifest, codec, featnet, "feature",
        FMTrainConfig(steps=1500, batch=16, seed=0),
        UNetConfig(), sched, out_dir=out, pool_size=400)
    return ema, history


@pytest.fixture(scope="session")
def trained_sr(manifest, trained_fm, trained_codec, trained_featnet, sched,
               tmp_path_factory):
    from desksr.sr import SRConfig, train_sr

    codec, _ = trained_codec
    featnet, _ = trained_featnet
    fm, _ = trained_fm
    out = tmp_path_factory.mktemp("sr")
    generator, history = train_sr(manifest, fm, codec, featnet,
                                  SRConfig(seed=0), sched,
                                  cond_source="feature", out_dir=out,
                                  steps=1200, pool_size=300)
    return generator, history
