import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bipedal_nmpc.gait import (
    FootstepPlan,
    HorizonOverrun,
    Profile,
    ReferenceOverrides,
    StepSpec,
    build_mapping,
    build_references,
    required_future_steps,
    swing_foot_trajectory,
)
from bipedal_nmpc.pendulum import ModelParams
from bipedal_nmpc.scenarios import STAIRS_STEPS


def test_stairs_support_heights_follow_table():
    plan = FootstepPlan.from_specs(STAIRS_STEPS, 10)
    # cumulative stair heights of the reference steps
    np.testing.assert_allclose(plan.ref_steps[:11, 2], [0, 0, 0.1, 0.2, 0.3, 0.3, 0.3, 0.2, 0.1, 0.1, 0.1], atol=1e-12)
    lengths = np.diff(plan.ref_steps[:11, 0])
    np.testing.assert_allclose(lengths, [0.15, 0.15, 0.15, 0.15, 0.15, 0.3, 0.25, 0.15, 0.05, 0.15])


def test_from_specs_alternates_sides():
    plan = FootstepPlan.from_specs([StepSpec(0.1, 0.2)], 4, first_side="right")
    np.testing.assert_allclose(plan.ref_steps[:, 1], [-0.1, 0.1, -0.1, 0.1, -0.1])
    assert [plan.side(c) for c in range(3)] == ["right", "left", "right"]


def test_mapping_boundary_sample_stays_on_current_step():
    plan = FootstepPlan.from_specs([StepSpec(0.1)], 6)
    m = build_mapping(plan, 0.05, 31, 2)
    # 16 samples (0.05 .. 0.8 s) on the current foot, 16 on the next
    assert m.e_c.sum() == 16
    assert m.E_c[:, 0].sum() == 15
    assert m.e_c[15] == 1.0 and m.E_c[16, 0] == 1.0


def test_mapping_needs_enough_future_steps():
    plan = FootstepPlan.from_specs([StepSpec(0.1)], 6)
    with pytest.raises(HorizonOverrun):
        build_mapping(plan, 0.05, 50, 2)
    with pytest.raises(HorizonOverrun):
        build_mapping(FootstepPlan.from_specs([StepSpec(0.1)], 1), 0.05, 40, 2)
    short = FootstepPlan.from_specs([StepSpec(0.1)], 1)
    with pytest.raises(HorizonOverrun):
        build_references(short, build_mapping(short, 0.05, 31, 2), ModelParams())


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 0.795), st.integers(1, 40), st.floats(0.3, 1.2))
def test_mapping_rows_are_one_hot_and_monotone(elapsed, n_h, T):
    plan = FootstepPlan.from_specs([StepSpec(0.1, duration=T)], 60)
    plan = FootstepPlan(plan.ref_steps, plan.durations, elapsed=min(elapsed, 0.99 * T))
    n_f = required_future_steps(n_h * 0.05, T) + 1
    m = build_mapping(plan, 0.05, n_h, n_f)
    np.testing.assert_allclose(m.e_c + m.E_c.sum(axis=1), 1.0)
    assert np.all(np.diff(m.cycle_index) >= 0)
    # brute-force oracle: sample time against cumulative cycle ends
    ends = np.cumsum(plan.durations) - plan.elapsed
    for i, t in enumerate(m.sample_times):
        assert m.cycle_index[i] == int(np.searchsorted(ends, t - 1e-9))


def test_advance_rolls_over_with_realized_step():
    plan = FootstepPlan.from_specs([StepSpec(0.2, 0.15, 0.1)], 4)
    dt = 0.005
    realized = np.array([0.25, 0.09, 99.0])
    for _ in range(159):
        plan = plan.advance(dt, realized, ((0.25, 0.09), (0.4, -0.05)))
    assert plan.cycle == 0
    assert plan.prev_next_step == (0.25, 0.09)
    plan = plan.advance(dt, realized, ((0.25, 0.09), (0.4, -0.05)))
    assert plan.cycle == 1 and plan.elapsed == 0.0
    np.testing.assert_allclose(plan.support, [0.25, 0.09, 0.1])  # z from the surface
    np.testing.assert_allclose(plan.previous_support, plan.ref_steps[0])
    assert plan.prev_next_step == (0.4, -0.05)
    assert plan.support_side == "left"


def test_references_use_step_midpoints():
    params = ModelParams()
    plan = FootstepPlan.from_specs([StepSpec(0.2, 0.14, 0.05)], 6)
    m = build_mapping(plan, 0.1, 10, 2)
    refs = build_references(plan, m, params)
    mid0 = 0.5 * (plan.ref_steps[0] + plan.ref_steps[1])
    mid1 = 0.5 * (plan.ref_steps[1] + plan.ref_steps[2])
    np.testing.assert_allclose([refs.c_x[0], refs.c_y[0]], mid0[:2])
    np.testing.assert_allclose([refs.c_x[-1], refs.c_y[-1]], mid1[:2])
    np.testing.assert_allclose(refs.c_z[-1], params.h_z_ref + 0.05)
    np.testing.assert_allclose(refs.d_z, [0.05, 0.1])


def test_reference_overrides_are_piecewise_linear():
    plan = FootstepPlan.from_specs([StepSpec(0.1)], 6)
    ov = ReferenceOverrides(height=Profile((0.0, 1.0), (0.0, -0.05)), pitch=Profile((0.0, 1.0), (0.0, 0.1)))
    m = build_mapping(plan, 0.05, 31, 2)
    refs = build_references(plan, m, ModelParams(), ov)
    np.testing.assert_allclose(refs.theta_p[9], 0.05)  # t = 0.5 s
    np.testing.assert_allclose(refs.c_z[-1], 0.467 - 0.05)


def test_profile_validation():
    with pytest.raises(ValueError):
        Profile((1.0, 0.0), (0.0, 0.0))
    with pytest.raises(ValueError):
        Profile((0.0,), (0.0, 1.0))


def test_swing_trajectory_endpoints_and_apex():
    a, b = np.array([0.0, 0.1, 0.0]), np.array([0.3, 0.1, 0.1])
    np.testing.assert_allclose(swing_foot_trajectory(a, b, 0.8, 0.05, 0.0), a)
    np.testing.assert_allclose(swing_foot_trajectory(a, b, 0.8, 0.05, 0.8), b)
    np.testing.assert_allclose(swing_foot_trajectory(a, b, 0.8, 0.05, 0.4)[2], 0.15)
    with pytest.raises(ValueError):
        swing_foot_trajectory(a, b, 0.8, 0.05, 1.0)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        StepSpec(duration=0.0)
    with pytest.raises(ValueError):
        FootstepPlan.from_specs([StepSpec()], 3, first_side="middle")
    with pytest.raises(ValueError):
        FootstepPlan.from_specs([], 3)
