import numpy as np
import pytest

from ttdsurv import data as D
from ttdsurv import model as M


@pytest.fixture
def tiny_config():
    # small enough for finite-difference sweeps, deep enough to exercise
    # every block (two layers, fusion, time net, head)
    return M.ModelConfig(input_dim=6, dow_dim=3, d_model=8, num_layers=2,
                         n_head=1, seq_len=12, dropout=0.0, dropout_time=0.0)


@pytest.fixture
def tiny_params(tiny_config):
    return M.init_params(tiny_config, np.random.default_rng([7, 0]))


def make_day(user_id="u0", date="2024-01-08", day_type="weekday",
             event_index=120, input_dim=6, seed=0, normalized=False):
    """Full-grid DaySequence with gaussian context, real clock features."""
    rng = np.random.default_rng(seed)
    return D.DaySequence(
        user_id=user_id, date=date, day_type=day_type, event_index=event_index,
        context=rng.normal(size=(D.GRID_SLOTS, input_dim)),
        abs_time=D.abs_time_features(), normalized=normalized,
    )


@pytest.fixture
def day_factory():
    return make_day
