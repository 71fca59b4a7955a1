"""Shared fixtures: one small synthetic dataset and one trained surrogate.

Both are session-scoped because several test modules (and most acceptance
criteria) reuse them; the dataset is 150 images at 64x64 and the surrogate a
16-channel extractor, small enough to build in a couple of seconds but large
enough that the fitted head generalizes (test R^2 around 0.55).
"""

import numpy as np
import pytest

from dragdiff.data import synth_vehicle_dataset, save_dataset
from dragdiff.experiments import cmd_train
from dragdiff.surrogate import load_model

N_RECORDS = 150
DATA_SEED = 101
SIDE = 64
CHANNELS = 16
FEATURE_SEED = 5
LAM = 10.0


@pytest.fixture(scope="session")
def synth_records():
    return synth_vehicle_dataset(N_RECORDS, DATA_SEED, side=SIDE)


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory, synth_records):
    d = tmp_path_factory.mktemp("synth64")
    save_dataset(synth_records, str(d))
    return str(d)


@pytest.fixture(scope="session")
def train_result(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("train")
    config = {
        "data": data_dir,
        "out": str(out),
        "out_model": None,
        "lam": LAM,
        "augment": False,
        "augment_seed": 1,
        "feature_seed": FEATURE_SEED,
        "channels": CHANNELS,
        "standardize": True,
        "seed": 0,
    }
    result = cmd_train(config)
    return str(out / "model.json"), result


@pytest.fixture(scope="session")
def model_path(train_result):
    return train_result[0]


@pytest.fixture(scope="session")
def fitted_model(model_path):
    return load_model(model_path)
