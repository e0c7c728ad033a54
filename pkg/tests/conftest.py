import numpy as np
import pytest

from util import make_oneway, make_repeated_measures, make_twoway, random_response


@pytest.fixture
def oneway_spec():
    return make_oneway(reps=4)


@pytest.fixture
def twoway_spec():
    return make_twoway()


@pytest.fixture
def rm_spec():
    """Repeated-measures design: 2 groups, 3 times, 7 subjects nested in group."""
    return make_repeated_measures()


@pytest.fixture
def rm_data(rm_spec):
    rng = np.random.default_rng(20)
    return random_response(rm_spec, rng, n_vars=6)
