import numpy as np
import pytest

from r1csi.harness import split_rng
from r1csi.model import despread, draw_channel, draw_pilots, transmit


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def make_snapshot(config, seed, trial=0):
    """One (channel, pilots, Y, y_user0) tuple drawn under the config."""
    key = trial if isinstance(trial, tuple) else (trial,)
    stream = split_rng(seed, 0, *key)
    chan = draw_channel(config, stream)
    pilots = draw_pilots(config, stream)
    Y = transmit(chan, pilots, config.sigma_n2, stream)
    return chan, pilots, Y, despread(Y, pilots.X[:, 0])
