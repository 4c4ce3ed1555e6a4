"""Shared session fixtures: datasets and trained reward models are expensive,
so heavy tests share one instance."""

import numpy as np
import pytest

from defectlab import rewardlab as rl
from defectlab import synthworld as sw


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The default 64x64 world: 4 kinds x 4 categories x 10, split 80/20."""
    root = tmp_path_factory.mktemp("dataset64") / "ds"
    sw.build_dataset(sw.DataConfig(seed=7), root)
    train = sw.load_quadruplets(root, "train")
    eval_ = sw.load_quadruplets(root, "eval")
    return {"root": root, "train": train, "eval": eval_, "categories": 4}


@pytest.fixture(scope="session")
def recog_models(default_dataset):
    """Recognition reward models trained once on the default world."""
    cfg = rl.RecogConfig(seed=0)
    return rl.train_recog(default_dataset["train"], default_dataset["eval"],
                          default_dataset["categories"], cfg)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 32x32 world for the training-heavy ablation suites."""
    root = tmp_path_factory.mktemp("dataset32") / "ds"
    cfg = sw.DataConfig(per_cell=8, height=32, width=32, eval_fraction=0.25, seed=11)
    sw.build_dataset(cfg, root)
    train = sw.load_quadruplets(root, "train")
    eval_ = sw.load_quadruplets(root, "eval")
    return {"root": root, "train": train, "eval": eval_, "categories": 4}
