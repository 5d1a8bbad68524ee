import math

import numpy as np
import pytest

from afemlab.quadrature import gauss01, triangle_rule


def _exact_tri_monomial(a, b):
    # integral of x^a y^b over the reference triangle {x,y>=0, x+y<=1}
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


@pytest.mark.parametrize("degree", [1, 2, 3, 4, 5, 6, 7, 8, 10])
def test_triangle_rule_exactness(degree):
    bary, w = triangle_rule(degree)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    # reference triangle (0,0), (1,0), (0,1): physical = (lambda_1, lambda_2)
    x, y = bary[:, 1], bary[:, 2]
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            got = 0.5 * np.sum(w * x ** a * y ** b)
            assert got == pytest.approx(_exact_tri_monomial(a, b), rel=1e-13, abs=1e-16)


def test_triangle_rule_points_inside():
    for degree in (2, 4, 9):
        bary, _ = triangle_rule(degree)
        assert bary.min() >= 0.0
        assert np.allclose(bary.sum(axis=1), 1.0)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8])
def test_gauss01_exactness(n):
    x, w = gauss01(n)
    for k in range(2 * n):
        assert np.sum(w * x ** k) == pytest.approx(1.0 / (k + 1), rel=1e-14)
