import numpy as np
import pytest

from app.exceptions import InvalidCorpus, InvalidPair, InvalidSet
from app.models.scene import SafetyField
from app.models.trajectory import Waypoint
from app.services.metrics_service import (avg_l2, build_report, collapse_diagnostic, collision_rate,
                                          diversity_metric, min_ade, select_mode)
from conftest import make_set, make_traj


def field_with_hole(i, j):
    grid = np.full((5, 5), 10.0)
    grid[i, j] = 0.0
    return SafetyField(Waypoint(0.0, 0.0), 1.0, grid)


class TestDiversityMetric:
    """Normalized per-timestamp mode spread."""

    @pytest.mark.parametrize(
        "modes, expected",
        [
            ([[[2, 2]], [[2, 2]]], 0.0),
            ([[[1, 0]], [[-1, 0]]], 1.0),
            ([[[4, 0]], [[5, 0]]], 1.0 / 4.5),
        ],
    )
    def test_examples(self, modes, expected):
        """Test identical, saturated and unsaturated pairs."""
        assert diversity_metric(make_set(modes), 0) == pytest.approx(expected, abs=1e-6)

    def test_reads_requested_step(self):
        """Test only the waypoints at t_index count."""
        modes = make_set([[[1, 1], [4, 0]], [[1, 1], [5, 0]]])
        assert diversity_metric(modes, 0) == 0.0
        assert diversity_metric(modes, 1) == pytest.approx(0.2222, abs=1e-4)

    def test_zero_magnitude_is_bounded(self):
        """Test modes spread around the origin saturate at 1 instead of dividing by zero."""
        assert diversity_metric(make_set([[[0, 0]], [[0, 0]]]), 0) == 0.0
        assert diversity_metric(make_set([[[1e-9, 0]], [[-1e-9, 0]]]), 0) <= 1.0

    def test_invalid_inputs(self):
        """Test one mode or an out-of-range step raises InvalidSet."""
        with pytest.raises(InvalidSet):
            diversity_metric(make_set([[[1, 0]]]), 0)
        with pytest.raises(InvalidSet):
            diversity_metric(make_set([[[1, 0]], [[2, 0]]]), 1)


class TestCollisionRate:
    """Per-timestamp collision fraction over a corpus."""

    def test_all_clear(self, open_field):
        """Test clear trajectories give 0 everywhere."""
        per_t, avg = collision_rate([make_traj([[1, 1], [2, 2]])] * 3, [open_field] * 3, 2.0)
        assert not per_t.any()
        assert avg == 0.0

    def test_all_violating(self):
        """Test trajectories parked on an obstacle give 1 everywhere."""
        per_t, avg = collision_rate([make_traj([[2, 2], [2, 2]])] * 2, [field_with_hole(2, 2)] * 2, 2.0)
        np.testing.assert_array_equal(per_t, [1.0, 1.0])
        assert avg == 1.0

    def test_one_scene_one_step(self, open_field):
        """Test one of four scenes violating at the second step only."""
        traj = make_traj([[1, 1], [2, 2], [3, 3]])
        fields = [open_field, open_field, open_field, field_with_hole(2, 2)]
        per_t, avg = collision_rate([traj] * 4, fields, 2.0)
        np.testing.assert_allclose(per_t, [0.0, 0.25, 0.0])
        assert avg == pytest.approx(0.25 / 3)

    def test_monotone_in_threshold(self, open_field):
        """Test raising d_thresh never lowers any per-step rate or the average."""
        trajs = [make_traj([[0, 2], [1, 2], [1.5, 2], [2, 2], [3, 3]]),
                 make_traj([[1, 1], [1.5, 1.5], [2, 2.5], [3, 2], [4, 4]]),
                 make_traj([[0, 0], [1, 1], [2, 2], [3, 3], [4, 4]])]
        fields = [field_with_hole(2, 2), field_with_hole(2, 2), open_field]
        results = [collision_rate(trajs, fields, d) for d in (0.1, 0.5, 1.0, 2.0, 5.0, 8.0, 11.0)]
        for (low_t, low_avg), (high_t, high_avg) in zip(results, results[1:]):
            assert np.all(high_t >= low_t)
            assert high_avg >= low_avg
        assert results[0][1] < results[-1][1] == 1.0

    def test_mismatched_lengths(self, open_field):
        """Test a missing field raises InvalidCorpus."""
        with pytest.raises(InvalidCorpus):
            collision_rate([make_traj([[1, 1]])] * 2, [open_field], 2.0)
        with pytest.raises(InvalidCorpus):
            collision_rate([], [], 2.0)


class TestCollapseDiagnostic:
    """Covariance trace of the modes."""

    def test_identical_modes(self):
        """Test identical modes have trace 0 and are their own mean."""
        trace, mean, cross = collapse_diagnostic(make_set([[[1, 2]], [[1, 2]]]))
        assert trace == 0.0
        np.testing.assert_array_equal(mean.points, [[1, 2]])
        assert cross is None

    def test_two_point_variance(self):
        """Test modes at -1 and +1 have mean 0 and trace 1."""
        trace, mean, _ = collapse_diagnostic(make_set([[[-1, 0]], [[1, 0]]]))
        assert trace == pytest.approx(1.0)
        np.testing.assert_allclose(mean.points, [[0, 0]])

    @pytest.mark.parametrize("c", [0.5, 3.0])
    def test_quadratic_scaling(self, c):
        """Test scaling every mode by c scales the trace by c squared."""
        modes = np.random.default_rng(2).uniform(-2, 2, size=(4, 3, 2))
        base, _, _ = collapse_diagnostic(make_set(modes))
        scaled, _, _ = collapse_diagnostic(make_set(c * modes))
        assert scaled == pytest.approx(c * c * base)

    def test_cross_form_vanishes(self):
        """Test the gt cross term averages to zero over the modes."""
        modes = make_set(np.random.default_rng(3).uniform(-2, 2, size=(3, 2, 2)))
        _, _, cross = collapse_diagnostic(modes, make_traj([[5, 5], [6, 6]]))
        assert cross == pytest.approx(0.0, abs=1e-9)


class TestTrajectoryErrors:
    """Average and best-of-modes displacement error."""

    @pytest.mark.parametrize(
        "pred, gt, expected",
        [
            ([[1, 2], [3, 4]], [[1, 2], [3, 4]], 0.0),
            ([[1, 0], [2, 0]], [[0, 0], [1, 0]], 1.0),
            ([[1, 0], [0, 2]], [[0, 0], [0, 0]], 1.5),
        ],
    )
    def test_avg_l2(self, pred, gt, expected):
        """Test zero, uniform and mixed offsets."""
        assert avg_l2(make_traj(pred), make_traj(gt)) == pytest.approx(expected)

    def test_length_mismatch(self):
        """Test trajectories of different T raise InvalidPair."""
        with pytest.raises(InvalidPair):
            avg_l2(make_traj([[0, 0]]), make_traj([[0, 0], [1, 0]]))

    def test_min_ade_picks_closest_mode(self):
        """Test the best mode's error is reported."""
        modes = make_set([[[3, 0]], [[0, 1]], [[0, -2]]])
        assert min_ade(modes, make_traj([[0, 0]])) == 1.0


class TestSelectMode:
    """Inference-time mode choice."""

    @pytest.mark.parametrize(
        "totals, expected",
        [([0.1, 0.5, 0.2], 1), ([1.0, 3.0, 3.0], 1), ([2.0, 2.0], 0), ([-1.0], 0)],
    )
    def test_argmax_first_tie(self, totals, expected):
        """Test the highest total wins and the first one wins ties."""
        assert select_mode(totals) == expected


class TestBuildReport:
    """Corpus aggregation."""

    @pytest.fixture
    def report(self, open_field):
        sets = [
            make_set([[[1, 0], [2, 0], [3, 0], [4, 0], [4, 1], [4, 2]],
                      [[1, 0], [2, 1], [3, 2], [4, 3], [4, 3], [4, 4]]], 'a'),
            make_set([[[1, 1]] * 6, [[1, 2]] * 6], 'b'),
        ]
        selected = [sets[0][0], sets[1][1]]
        gts = [sets[0][0], make_traj([[1, 1]] * 6)]
        return build_report(sets, selected, gts, [open_field, field_with_hole(1, 2)], 2.0)

    def test_summary_keys(self, report):
        """Test the summary reports 1s, 2s, 3s and the average."""
        summary = report.summary()
        assert set(summary['div']) == {'1s', '2s', '3s', 'avg'}
        assert set(summary['collision']) == {'1s', '2s', '3s', 'avg'}
        assert summary['num_scenes'] == 2
        assert 'collapse_cross_trace' in summary['diagnostics']

    def test_values(self, report):
        """Test averages against hand-computed per-scene values."""
        assert report.collision_at == [0.5] * 6
        assert report.avg_l2 == pytest.approx(0.5)
        assert report.min_ade == 0.0
        assert all(0.0 <= v <= 1.0 for v in report.div_at)

    def test_per_step_rows(self, report):
        """Test one CSV row per timestamp in seconds."""
        rows = report.per_step_rows()
        assert [row['t'] for row in rows] == [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
        assert rows[0]['collision'] == 0.5

    def test_empty_corpus(self):
        """Test an empty corpus raises InvalidCorpus."""
        with pytest.raises(InvalidCorpus):
            build_report([], [], [], [], 2.0)
