import itertools

import numpy as np
import pytest

from app.exceptions import InvalidBatch, InvalidCost
from app.services.matching_service import hungarian, l1_loss, match_loss
from app.services.reward_service import diversity_reward
from conftest import make_set, make_traj


def brute_force(cost):
    n = len(cost)
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


class TestHungarian:
    """Optimal assignment on square cost matrices."""

    def test_identity_friendly(self):
        """Test a zero diagonal with unit off-diagonal gives the identity at cost 0."""
        cost = np.ones((4, 4)) - np.eye(4)
        result = hungarian(cost)
        assert result.perm == (0, 1, 2, 3)
        assert result.total_cost == 0.0

    def test_two_by_two(self):
        """Test [[1,2],[3,1]] keeps the diagonal at cost 2."""
        result = hungarian(np.array([[1.0, 2.0], [3.0, 1.0]]))
        assert result.perm == (0, 1)
        assert result.total_cost == 2.0

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_exhaustive_search(self, seed):
        """Test the optimum equals the minimum over all 720 permutations."""
        cost = np.random.default_rng(seed).uniform(0, 10, size=(6, 6))
        result = hungarian(cost)
        assert result.total_cost == pytest.approx(brute_force(cost), abs=1e-12 * max(1.0, brute_force(cost)))
        assert sorted(result.perm) == list(range(6))
        assert sum(cost[i, j] for i, j in enumerate(result.perm)) == pytest.approx(result.total_cost)

    @pytest.mark.parametrize(
        "cost, expected",
        [
            (np.zeros((3, 3)), (0, 1, 2)),
            (np.eye(3), (1, 2, 0)),
            (np.array([[0.0, 0.0], [0.0, 0.0]]), (0, 1)),
        ],
    )
    def test_ties_take_smallest_permutation(self, cost, expected):
        """Test equal-cost optima resolve to the lexicographically smallest perm."""
        assert hungarian(cost).perm == expected

    @pytest.mark.parametrize(
        "cost",
        [
            np.ones((2, 3)),
            np.ones(4),
            np.array([[0.0, np.nan], [1.0, 0.0]]),
            np.array([[0.0, np.inf], [1.0, 0.0]]),
            np.array([[0.0, -1.0], [1.0, 0.0]]),
        ],
    )
    def test_invalid_cost(self, cost):
        """Test non-square, non-finite and negative matrices raise InvalidCost."""
        with pytest.raises(InvalidCost):
            hungarian(cost)


class TestMatchLoss:
    """Hungarian-matched imitation loss."""

    def test_same_order(self):
        """Test predictions equal to references give loss 0 and the identity."""
        refs = make_set([[[0, 0], [1, 0]], [[0, 1], [0, 2]], [[3, 3], [4, 4]]])
        loss, assignment, grad = match_loss(refs, list(refs))
        assert loss == 0.0
        assert assignment.perm == (0, 1, 2)
        assert not grad.any()

    def test_shuffled_references(self):
        """Test a shuffled reference list is recovered exactly."""
        preds = make_set([[[0, 0], [1, 0]], [[0, 1], [0, 2]], [[3, 3], [4, 4]]])
        shuffle = [2, 0, 1]
        refs = [preds[i] for i in shuffle]
        loss, assignment, _ = match_loss(preds, refs)
        assert loss == 0.0
        assert [shuffle[j] for j in assignment.perm] == [0, 1, 2]

    def test_crossed_single_waypoint(self):
        """Test {(0,0),(1,0)} against {(1,0),(0,0)} crosses the match at loss 0."""
        preds = make_set([[[0, 0]], [[1, 0]]])
        refs = [make_traj([[1, 0]]), make_traj([[0, 0]])]
        loss, assignment, _ = match_loss(preds, refs)
        assert assignment.perm == (1, 0)
        assert loss == 0.0

    def test_gradient(self):
        """Test the returned gradient matches central differences of the loss."""
        rng = np.random.default_rng(4)
        preds = rng.uniform(-3, 3, size=(3, 4, 2))
        refs = rng.uniform(-3, 3, size=(3, 4, 2))
        _, _, grad = match_loss(preds, refs)

        h = 1e-6
        numeric = np.zeros_like(preds)
        for index in np.ndindex(*preds.shape):
            up, down = preds.copy(), preds.copy()
            up[index] += h
            down[index] -= h
            numeric[index] = (match_loss(up, refs)[0] - match_loss(down, refs)[0]) / (2 * h)
        np.testing.assert_allclose(grad, numeric, rtol=1e-6, atol=1e-8)

    def test_fewer_references_cycle(self):
        """Test a single reference is matched by every mode."""
        preds = make_set([[[1, 0]], [[0, 2]], [[0, 0]]])
        loss, assignment, grad = match_loss(preds, [make_traj([[0, 0]])])
        assert loss == pytest.approx((1 + 4 + 0) / 3)
        assert sorted(assignment.perm) == [0, 1, 2]
        np.testing.assert_allclose(grad[:, 0], 2 * preds.stack()[:, 0] / 3)

    def test_extra_references_dropped(self):
        """Test with more references than modes only the nearest are matched."""
        preds = make_set([[[0, 0]], [[5, 0]]])
        refs = [make_traj([[100, 0]]), make_traj([[5, 1]]), make_traj([[0, 1]])]
        loss, assignment, _ = match_loss(preds, refs)
        assert assignment.perm == (2, 1)
        assert loss == pytest.approx(1.0)

    def test_empty_inputs(self):
        """Test empty predictions or references raise InvalidBatch."""
        with pytest.raises(InvalidBatch):
            match_loss(make_set([[[0, 0]]]), [])
        with pytest.raises(InvalidBatch):
            match_loss(np.zeros((0, 1, 2)), [make_traj([[0, 0]])])

    def test_horizon_mismatch(self):
        """Test references of another horizon raise InvalidBatch."""
        with pytest.raises(InvalidBatch):
            match_loss(make_set([[[0, 0], [1, 0]]]), [make_traj([[0, 0]])])


class TestL1Loss:
    """Single-target l1 imitation loss."""

    def test_value_and_gradient(self):
        """Test the mean flattened l1 distance and its sign gradient."""
        preds = make_set([[[1, 0], [0, -2]], [[0, 0], [0, 0]]])
        loss, grad = l1_loss(preds, make_traj([[0, 0], [0, 0]]))
        assert loss == pytest.approx(1.5)
        np.testing.assert_array_equal(grad[0], [[0.5, 0.0], [0.0, -0.5]])
        assert not grad[1].any()

    def test_shape_mismatch(self):
        """Test a gt of a different horizon raises InvalidBatch."""
        with pytest.raises(InvalidBatch):
            l1_loss(make_set([[[1, 0]]]), make_traj([[0, 0], [1, 0]]))


class TestReferenceSpread:
    """Extra references pull collapsed modes apart."""

    GT = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]
    VARIANT = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]

    def step(self, refs, lr=0.5):
        preds = np.repeat(np.array([self.GT]), 2, axis=0)
        _, _, grad = match_loss(preds, np.array(refs))
        return preds - lr * grad

    def test_single_reference_keeps_modes_collapsed(self):
        """Test modes sitting on the only reference get no gradient and stay identical."""
        assert diversity_reward(self.step([self.GT])) == 0.0

    def test_second_reference_spreads_modes(self):
        """Test one gradient step towards two references separates the modes."""
        moved = self.step([self.GT, self.VARIANT])
        assert diversity_reward(moved) > 0.0
        np.testing.assert_allclose(moved[0], self.GT)

    def test_l1_pulls_spread_modes_together(self):
        """Test a single-gt l1 step shrinks the spread that matching preserves."""
        preds = np.array([self.GT, self.VARIANT])
        _, l1_grad = l1_loss(preds, np.array(self.GT))
        _, _, match_grad = match_loss(preds, np.array([self.GT, self.VARIANT]))
        assert diversity_reward(preds - 0.1 * l1_grad) < diversity_reward(preds)
        assert diversity_reward(preds - 0.1 * match_grad) == pytest.approx(diversity_reward(preds))
