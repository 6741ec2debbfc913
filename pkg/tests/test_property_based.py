import itertools

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from app.models.scene import AgentState
from app.models.trajectory import Waypoint
from app.services.matching_service import hungarian, match_loss
from app.services.metrics_service import collapse_diagnostic, diversity_metric
from app.services.reward_service import diversity_reward, grpo_advantages
from app.services.safety_service import build_safety_field
from conftest import make_set

coordinates = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False, allow_infinity=False)


@st.composite
def mode_stacks(draw, min_modes=2, max_modes=5, max_horizon=4):
    """(M, T, 2) arrays of waypoints inside the scene extent."""
    modes = draw(st.integers(min_modes, max_modes))
    horizon = draw(st.integers(1, max_horizon))
    return draw(arrays(np.float64, (modes, horizon, 2), elements=coordinates))


@st.composite
def agent_lists(draw):
    count = draw(st.integers(0, 4))
    return [AgentState(Waypoint(draw(st.floats(-8, 8)), draw(st.floats(-8, 8))), (0.0, 0.0),
                       draw(st.floats(0.5, 2.0))) for _ in range(count)]


class TestPropertyBasedMatching:
    """Invariants of the optimal matching."""

    @settings(max_examples=50, deadline=None)
    @given(stack=mode_stacks(), data=st.data())
    def test_loss_ignores_prediction_order(self, stack, data):
        """Test permuting the predictions leaves the matched loss unchanged."""
        refs = data.draw(arrays(np.float64, stack.shape, elements=coordinates))
        order = data.draw(st.permutations(range(len(stack))))
        loss, _, _ = match_loss(stack, refs)
        shuffled, _, _ = match_loss(stack[list(order)], refs)
        assert np.isclose(loss, shuffled, rtol=1e-9, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(cost=arrays(np.float64, (4, 4), elements=st.floats(0.0, 100.0)))
    def test_assignment_is_optimal(self, cost):
        """Test no permutation beats the returned assignment."""
        best = min(sum(cost[i, p[i]] for i in range(4)) for p in itertools.permutations(range(4)))
        assert hungarian(cost).total_cost <= best + 1e-9 * max(1.0, best)


class TestPropertyBasedDiversity:
    """Invariants of the diversity reward and metric."""

    @settings(max_examples=50, deadline=None)
    @given(stack=mode_stacks(), shift=arrays(np.float64, (2,), elements=coordinates))
    def test_reward_translation_invariant(self, stack, shift):
        """Test shifting every waypoint by the same offset keeps r_div."""
        assert np.isclose(diversity_reward(stack), diversity_reward(stack + shift), rtol=1e-9, atol=1e-7)

    @settings(max_examples=100, deadline=None)
    @given(stack=mode_stacks())
    def test_metric_in_unit_interval(self, stack):
        """Test Div stays in [0, 1] at every step."""
        modes = make_set(stack)
        for t in range(modes.horizon):
            assert 0.0 <= diversity_metric(modes, t) <= 1.0

    @settings(max_examples=50, deadline=None)
    @given(stack=mode_stacks(), data=st.data())
    def test_metric_permutation_invariant(self, stack, data):
        """Test reordering the modes keeps Div."""
        order = data.draw(st.permutations(range(len(stack))))
        a = diversity_metric(make_set(stack), 0)
        b = diversity_metric(make_set(stack[list(order)]), 0)
        assert np.isclose(a, b, rtol=1e-9, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(stack=mode_stacks())
    def test_identical_modes_have_zero_diversity(self, stack):
        """Test copies of one mode score 0 for the reward, the metric and the trace."""
        copies = np.repeat(stack[:1], len(stack), axis=0)
        assert diversity_reward(copies) == 0.0
        assert diversity_metric(make_set(copies), 0) == 0.0
        assert collapse_diagnostic(make_set(copies))[0] <= 1e-20


class TestPropertyBasedAdvantages:
    """Invariants of group-relative advantages."""

    @settings(max_examples=100, deadline=None)
    @given(rewards=st.lists(st.floats(-10.0, 10.0), min_size=2, max_size=16), scale=st.booleans())
    def test_centered_sum_is_zero(self, rewards, scale):
        """Test centred advantages sum to zero with or without stddev scaling."""
        assert abs(grpo_advantages(rewards, std_scale=scale).sum()) <= 1e-9 * max(1.0, len(rewards))


class TestPropertyBasedSafetyField:
    """Invariants of the distance field."""

    @settings(max_examples=30, deadline=None)
    @given(agents=agent_lists(), cell=st.sampled_from([0.5, 1.0, 2.0]))
    def test_neighbouring_cells_are_lipschitz(self, agents, cell):
        """Test adjacent cells differ by at most one cell size."""
        field = build_safety_field(agents, [], (-10.0, 10.0, -10.0, 10.0), cell)
        grid = field.grid
        assert np.all(grid >= 0)
        assert np.all(np.abs(np.diff(grid, axis=0)) <= cell + 1e-9)
        assert np.all(np.abs(np.diff(grid, axis=1)) <= cell + 1e-9)
