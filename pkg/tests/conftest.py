"""Shared fixtures: a small generated dataset and a lightly-trained pipeline.

The session-scoped model keeps per-module tests fast; the acceptance suite
builds its own full-size runs.
"""

import warnings

import numpy as np
import pytest

from phraseground import nn
from phraseground import pipeline as pl
from phraseground import synthdata as sd


def small_config(seed=0):
    cfg = pl.PipelineConfig(seed=seed)
    cfg.schedules = {
        "pin1": nn.TrainSchedule(base_lr=0.5, epochs=10, decay_every=8, batch_size=40),
        "pin2": nn.TrainSchedule(base_lr=1.0, epochs=60, decay_every=25, batch_size=8),
        "irn": nn.TrainSchedule(base_lr=0.5, epochs=40, decay_every=18, batch_size=8),
        "prn": nn.TrainSchedule(base_lr=0.01, epochs=25, decay_every=12, batch_size=8),
        "weak": nn.TrainSchedule(base_lr=0.3, epochs=12, decay_every=6, batch_size=8),
    }
    return cfg


@pytest.fixture(scope="session")
def small_dataset():
    return sd.generate(sd.SynthConfig(seed=7, n_scenes=50))


@pytest.fixture(scope="session")
def small_model(small_dataset):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, _ = pl.train_pipeline(small_dataset, small_config())
    return model
