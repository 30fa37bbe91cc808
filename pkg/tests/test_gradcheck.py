import numpy as np
import pytest

from sr4ir import gradcheck
from sr4ir import tensor as T


@pytest.mark.parametrize("name", list(gradcheck.CASES))
def test_op_gradient(name):
    err = gradcheck.run_suite(names=[name])[name]
    assert err < gradcheck.TOLERANCE, f"{name}: {err:.2e}"


def test_check_detects_wrong_gradient():
    # a deliberately broken op: forward x**2, backward claims 3x
    def bad_square(x):
        return T._make(x.data ** 2, (x,), lambda g: (3 * x.data * g,))

    rng = np.random.default_rng(0)
    err = gradcheck.check(lambda x: bad_square(x), {"x": rng.uniform(0.5, 1.5, (3, 4))}, rng)
    assert err > 0.1


def test_away_from_kinks():
    rng = np.random.default_rng(1)
    x = gradcheck.away_from(rng, (1000,), points=(0.0,), margin=0.05)
    assert np.abs(x).min() >= 0.05
