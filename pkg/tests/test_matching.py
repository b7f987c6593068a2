"""
Tests for bipartite matching, point-order matching and the training losses.
"""
import itertools
import math

import numpy as np
import pytest

from pip_motion.errors import ContractError, DimensionError
from pip_motion.matching import (
    Assignment,
    LossComponents,
    PointMatching,
    det_loss,
    focal_loss,
    hungarian,
    map_loss,
    match_agents,
    match_map_instances,
    match_points,
    motion_loss,
    select_best_modes,
    total_loss,
)
from pip_motion.models import AgentGT, MapInstanceGT
from pip_motion.tensor import constant, finite_diff_check


def brute_force_cost(cost: np.ndarray) -> float:
    m, n = cost.shape
    if m > n:
        return brute_force_cost(cost.T)
    perms = np.array(list(itertools.permutations(range(n), m)))
    return float(cost[np.arange(m), perms].sum(axis=1).min())


def car(center, future, class_id=0, complete=True):
    return AgentGT(class_id=class_id, center=center, size=(4.5, 1.9), yaw=0.0, future=future, complete=complete)


def line(y, n_points=4, class_id=0):
    return MapInstanceGT(class_id=class_id, points=[(float(x), float(y)) for x in range(n_points)])


# =============================================================================
# Assignment
# =============================================================================

class TestHungarian:
    """Test minimum-cost bipartite assignment."""

    def test_diagonal_is_identity(self):
        cost = np.array([[0.0, 5.0, 5.0], [5.0, 0.0, 5.0], [5.0, 5.0, 0.0]])
        assert hungarian(cost).pairs == ((0, 0), (1, 1), (2, 2))

    def test_single_cell(self):
        assert hungarian(np.array([[7.0]])).pairs == ((0, 0),)

    def test_empty(self):
        assert len(hungarian(np.zeros((0, 3)))) == 0

    def test_rectangular_uses_min_dimension(self, rng):
        assert len(hungarian(rng.random((2, 5)))) == 2
        assert len(hungarian(rng.random((5, 2)))) == 2

    def test_matches_exhaustive_search(self, rng):
        for _ in range(1000):
            m, n = rng.integers(1, 8, size=2)
            cost = rng.random((m, n)) * 10
            pairs = hungarian(cost).pairs
            total = sum(cost[i, j] for i, j in pairs)
            assert total == pytest.approx(brute_force_cost(cost), abs=1e-9)

    def test_infinite_cost_becomes_sentinel(self):
        cost = np.array([[1.0, math.inf], [math.inf, 2.0]])
        assert hungarian(cost).pairs == ((0, 0), (1, 1))

    def test_nan_cost(self):
        with pytest.raises(ContractError):
            hungarian(np.array([[math.nan]]))

    def test_not_a_matrix(self):
        with pytest.raises(DimensionError):
            hungarian(np.zeros(3))

    def test_duplicate_index(self):
        with pytest.raises(ContractError):
            Assignment(((0, 1), (0, 2)))


class TestPointMatching:
    """Test forward/reversed point order selection."""

    def test_identical_is_forward(self, rng):
        pts = rng.standard_normal((5, 2))
        pm, cost = match_points(pts, pts)
        assert pm.orientation == "forward" and cost == 0.0

    def test_reversed_gt(self, rng):
        pts = rng.standard_normal((5, 2))
        pm, cost = match_points(pts, pts[::-1])
        assert pm.orientation == "reversed" and cost == 0.0
        assert pm.order.tolist() == [4, 3, 2, 1, 0]

    def test_picks_smaller_orientation(self, rng):
        for _ in range(100):
            pred, gt = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
            _, cost = match_points(pred, gt)
            assert cost == min(np.abs(pred - gt).sum(), np.abs(pred - gt[::-1]).sum())

    def test_reversing_both_keeps_cost(self, rng):
        pred, gt = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
        _, a = match_points(pred, gt)
        _, b = match_points(pred[::-1], gt[::-1])
        assert a == pytest.approx(b, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            match_points(np.zeros((3, 2)), np.zeros((4, 2)))


class TestSceneMatching:
    """Test map instance and agent matching."""

    def test_exact_instance_wins(self, config):
        gt = [line(0.0)]
        pts = np.array([[[float(x), 0.0] for x in range(4)], [[float(x), 3.0] for x in range(4)]])
        scores = np.array([[0.5, 0.0, 0.0], [0.5, 0.0, 0.0]])
        assignment, pms = match_map_instances(scores, pts[::-1], gt, config)
        assert assignment.pairs == ((1, 0),)
        assert pms[0].orientation == "forward"

    def test_exact_agent_wins(self, config):
        gt = [car((0.0, 0.0), [(1.0, 0.0)] * 3)]
        scores = np.full((2, 4), 0.5)
        assignment = match_agents(scores, np.array([[5.0, 5.0], [0.0, 0.0]]), gt, config)
        assert assignment.pairs == ((1, 0),)

    def test_far_single_pair_still_matched(self, config):
        gt = [car((0.0, 0.0), [(1.0, 0.0)] * 3)]
        assignment = match_agents(np.full((1, 4), 0.1), np.array([[40.0, -40.0]]), gt, config)
        assert assignment.pairs == ((0, 0),)

    def test_best_mode_uses_final_displacement(self, config):
        gt = [car((0.0, 0.0), [(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)])]
        offsets = np.array([[[[1.0, 3.0], [1.0, 0.0], [1.0, -2.0]],
                             [[1.0, 0.0], [1.0, 0.0], [1.0, 2.0]]]])
        best = select_best_modes(offsets, gt, Assignment(((0, 0),)), [0, 1], config)
        assert best == {0: 0}


# =============================================================================
# Losses
# =============================================================================

class TestFocalLoss:
    """Test the sigmoid focal loss."""

    def test_reduces_to_scaled_cross_entropy(self, rng):
        scores = rng.uniform(0.01, 0.99, size=1000)
        targets = (rng.random(1000) < 0.5).astype(float)
        for p, t in zip(scores, targets):
            loss = float(focal_loss(constant([p]), np.array([t]), 0.5, 0.0).data)
            bce = -(t * math.log(p) + (1 - t) * math.log(1 - p))
            assert loss == pytest.approx(0.5 * bce, abs=1e-12)

    def test_half_score_positive(self):
        loss = float(focal_loss(constant([0.5]), np.array([1.0]), 0.25, 2.0).data)
        assert loss == pytest.approx(0.25 * 0.25 * math.log(2.0), abs=1e-12)

    def test_confident_correct_is_near_zero(self):
        loss = float(focal_loss(constant([1 - 1e-9, 1e-9]), np.array([1.0, 0.0]), 0.25, 2.0).data)
        assert loss < 1e-12

    def test_empty(self):
        assert float(focal_loss(constant(np.zeros((0, 3))), np.zeros((0, 3)), 0.25, 2.0).data) == 0.0

    def test_target_shape_mismatch(self):
        with pytest.raises(DimensionError):
            focal_loss(constant([0.5, 0.5]), np.array([1.0]), 0.25, 2.0)

    def test_gradient(self, rng):
        targets = (rng.random((4, 3)) < 0.3).astype(float)
        err = finite_diff_check(lambda p: focal_loss(p["s"], targets, 0.25, 2.0),
                                {"s": rng.uniform(0.05, 0.95, size=(4, 3))})
        assert err < 1e-5


class TestRegressionLosses:
    """Test the map, detection and motion regression terms."""

    def test_map_offset_per_point(self, config):
        gt = [line(0.0)]
        pts = np.array([[[float(x) + 1.0, 1.0] for x in range(4)]])
        _, reg = map_loss(constant([[0.9, 0.0, 0.0]]), constant(pts), gt, Assignment(((0, 0),)),
                          [PointMatching("forward", 4)], config)
        assert float(reg.data) == pytest.approx(8.0)

    def test_map_perfect(self, config):
        gt = [line(0.0), line(5.0, class_id=2)]
        pts = np.array([np.asarray(g.points) for g in gt])
        scores = np.array([[1 - 1e-3, 1e-3, 1e-3], [1e-3, 1e-3, 1 - 1e-3]])
        assignment, pms = match_map_instances(scores, pts, gt, config)
        cls, reg = map_loss(constant(scores), constant(pts), gt, assignment, pms, config)
        assert float(reg.data) == 0.0
        assert float(cls.data) < 1e-6

    def test_map_reversed_prediction_costs_nothing(self, config):
        gt = [line(0.0)]
        pts = np.array([np.asarray(gt[0].points)[::-1]])
        assignment, pms = match_map_instances(np.array([[0.9, 0.0, 0.0]]), pts, gt, config)
        _, reg = map_loss(constant([[0.9, 0.0, 0.0]]), constant(pts), gt, assignment, pms, config)
        assert float(reg.data) == 0.0

    def test_detection_center_offset(self, config):
        gt = [car((0.0, 0.0), [(1.0, 0.0)] * 3)]
        boxes = np.array([[3.0, 4.0, 4.5, 1.9, 0.0]])
        _, reg = det_loss(constant(np.full((1, 4), 0.5)), constant(boxes), gt, Assignment(((0, 0),)), config)
        assert float(reg.data) == pytest.approx(7.0)

    def test_exact_mode_costs_nothing(self, config):
        gt = [car((0.0, 0.0), [(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)])]
        offsets = np.array([[[[1.0, 0.0]] * 3, [[0.0, 5.0]] * 3]])
        loss = motion_loss(constant(offsets), gt, Assignment(((0, 0),)), [0, 1], config)
        assert float(loss.data) == 0.0

    def test_final_displacement_picks_mode(self, config):
        gt = [car((0.0, 0.0), [(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)])]
        offsets = np.array([[[[1.0, 3.0], [1.0, 0.0], [1.0, -2.0]],
                             [[1.0, 0.0], [1.0, 0.0], [1.0, 2.0]]]])
        loss = motion_loss(constant(offsets), gt, Assignment(((0, 0),)), [0, 1], config)
        assert float(loss.data) == pytest.approx(7.0)

    def test_static_agent_contributes_nothing(self, config):
        cone = car((0.0, 0.0), [(0.0, 0.0)] * 3, class_id=2)
        offsets = np.ones((1, config.N_MODE, config.T_F, 2))
        loss = motion_loss(constant(offsets), [cone], Assignment(((0, 0),)), [0, 1], config)
        assert float(loss.data) == 0.0

    def test_incomplete_future_contributes_nothing(self, config):
        agent = car((0.0, 0.0), [(1.0, 0.0)], complete=False)
        offsets = np.ones((1, config.N_MODE, config.T_F, 2))
        loss = motion_loss(constant(offsets), [agent], Assignment(((0, 0),)), [0, 1], config)
        assert float(loss.data) == 0.0


class TestTotalLoss:
    """Test the weighted sum of the five components."""

    def test_unit_components(self):
        ones = [constant(1.0)] * 5
        assert float(total_loss(ones, (0.8, 0.1, 0.8, 0.4, 0.2)).data) == pytest.approx(2.3)

    def test_zero_components(self):
        assert float(total_loss([constant(0.0)] * 5, (0.8, 0.1, 0.8, 0.4, 0.2)).data) == 0.0

    def test_motion_only(self):
        components = LossComponents(*(constant(v) for v in (1.0, 2.0, 3.0, 4.0, 5.0)))
        assert float(total_loss(components, (0, 0, 0, 0, 1)).data) == 5.0

    def test_wrong_arity(self):
        with pytest.raises(ContractError):
            total_loss([constant(1.0)] * 4, (1, 1, 1, 1))
