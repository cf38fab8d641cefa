"""Central-difference checks (h = 1e-5) for every differentiable primitive."""

import pytest

from hsemis.nn.gradcheck import check_gradients

from gradient_cases import CONFIGS, PRIMITIVES, TOLERANCE, case_rng


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    build = PRIMITIVES[name]
    worst = 0.0
    for i in range(CONFIGS):
        fn, params = build(case_rng(name, i))
        worst = max(worst, check_gradients(fn, params, h=1e-5))
    assert worst < TOLERANCE, f"{name}: relative error {worst:.3e}"
