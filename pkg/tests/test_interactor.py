"""
Tests for the interaction pipeline: motion queries, agent-wise filtering,
map encoding, motion-map interaction and the decoders.
"""
import math

import numpy as np
import pytest

from conftest import random_bundle
from pip_motion.errors import ContractError, DimensionError
from pip_motion.interactor import (
    ModeBank,
    QueryBundle,
    decode_motion,
    decode_perception,
    encode_map_instances,
    filter_map_for_agent,
    forward,
    full_forward,
    fuse_motion_queries,
    form_motion_queries,
    map_position_encoding,
    motion_map_block,
    motion_self_block,
    normalize_map_for_agent,
    trajectory_codec,
)
from pip_motion.models import validate
from pip_motion.params import ModelParams, scope
from pip_motion.tensor import constant, multi_head_attention, slice_axis


@pytest.fixture
def bound(params):
    return params.bind()


# =============================================================================
# Motion queries
# =============================================================================

class TestMotionQueries:
    """Test agent-mode query formation and the joint self block."""

    def test_zero_modes_copy_agent(self, rng):
        agents = rng.standard_normal((3, 8))
        out = form_motion_queries(constant(agents), ModeBank(constant(np.zeros((2, 8)))))
        for j in range(2):
            np.testing.assert_array_equal(out.data[:, j], agents)

    def test_zero_agent_copies_modes(self, rng):
        modes = rng.standard_normal((4, 8))
        out = form_motion_queries(constant(np.zeros((1, 8))), ModeBank(constant(modes)))
        np.testing.assert_array_equal(out.data[0], modes)

    def test_matches_scalar_loop(self, rng):
        agents, modes = rng.standard_normal((3, 8)), rng.standard_normal((2, 8))
        out = form_motion_queries(constant(agents), ModeBank(constant(modes)))
        for i in range(3):
            for j in range(2):
                for c in range(8):
                    assert out.data[i, j, c] == agents[i, c] + modes[j, c]

    def test_additive_in_agent_query(self, rng):
        agents, delta = rng.standard_normal((2, 8)), rng.standard_normal((2, 8))
        modes = ModeBank(constant(rng.standard_normal((3, 8))))
        shifted = form_motion_queries(constant(agents + delta), modes).data
        base = form_motion_queries(constant(agents), modes).data
        np.testing.assert_allclose(shifted - base, np.repeat(delta[:, None, :], 3, axis=1), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            form_motion_queries(constant(np.zeros((2, 8))), ModeBank(constant(np.zeros((2, 6)))))

    def test_initial_modes_are_orthogonal(self, bound):
        assert ModeBank.from_params(bound).max_overlap() < 1e-10

    def test_self_block_is_permutation_equivariant(self, rng, bound, config):
        q = rng.standard_normal((3, config.N_MODE, config.C))
        perm = [2, 0, 1]
        out = motion_self_block(constant(q), bound, config).data
        permuted = motion_self_block(constant(q[perm]), bound, config).data
        np.testing.assert_allclose(permuted, out[perm], atol=1e-12)

    def test_self_block_is_deterministic(self, rng, bound, config):
        q = constant(rng.standard_normal((1, 1, config.C)))
        np.testing.assert_array_equal(motion_self_block(q, bound, config).data,
                                      motion_self_block(q, bound, config).data)


# =============================================================================
# Agent-wise normalization and filtering
# =============================================================================

class TestNormalization:
    """Test the agent-centric coordinate shift and the trajectory codec."""

    def test_origin_agent_is_identity(self, rng):
        points = rng.standard_normal((2, 4, 2))
        np.testing.assert_array_equal(normalize_map_for_agent(points, (0.0, 0.0)), points)

    def test_shift(self):
        out = normalize_map_for_agent(np.array([[[5.0, 5.0]]]), (2.0, 3.0))
        assert out.tolist() == [[[3.0, 2.0]]]

    def test_common_translation_cancels(self, rng):
        points = np.round(rng.uniform(-40, 40, size=(3, 4, 2)) * 64) / 64
        agent = np.round(rng.uniform(-40, 40, size=2) * 64) / 64
        shift = np.array([7.0, -3.0])
        np.testing.assert_array_equal(normalize_map_for_agent(points + shift, agent + shift),
                                      normalize_map_for_agent(points, agent))

    def test_stationary_agent_encodes_to_zero(self):
        offsets = trajectory_codec(np.tile([2.0, 3.0], (5, 1)), "encode", (2.0, 3.0))
        np.testing.assert_array_equal(offsets, np.zeros((5, 2)))

    def test_encode_example(self):
        offsets = trajectory_codec(np.array([[1.0, 0.0], [3.0, 0.0]]), "encode", (0.0, 0.0))
        assert offsets.tolist() == [[1.0, 0.0], [2.0, 0.0]]

    def test_round_trip(self, rng):
        for _ in range(1000):
            anchor = rng.uniform(-50, 50, size=2)
            positions = anchor + np.cumsum(rng.normal(0, 3, size=(12, 2)), axis=0)
            offsets = trajectory_codec(positions, "encode", anchor)
            np.testing.assert_allclose(trajectory_codec(offsets, "decode", anchor), positions, atol=1e-12, rtol=0)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            trajectory_codec(np.zeros((4, 2)), "decode", (0.0, 0.0), steps=3)


class TestFiltering:
    """Test confidence and distance filtering of map instances per agent."""

    def test_open_thresholds_keep_everything(self, bundle):
        indices, selected, normalized = filter_map_for_agent(bundle, 0, 0.0, math.inf)
        assert indices == list(range(bundle.n_instances))
        assert selected.shape == bundle.map_queries.shape
        assert normalized.shape == bundle.map_points.shape

    def test_low_score_is_dropped(self, rng, config):
        bundle = random_bundle(rng, config, n_agents=1, n_instances=2, spread=5.0)
        bundle.map_scores = np.array([[0.4, 0.1, 0.2], [0.9, 0.0, 0.0]])
        indices, _, _ = filter_map_for_agent(bundle, 0, 0.5, math.inf)
        assert indices == [1]

    def test_far_instance_is_dropped(self, rng, config):
        bundle = random_bundle(rng, config, n_agents=1, n_instances=2)
        bundle.agent_positions = np.zeros((1, 2))
        bundle.map_points = np.stack([np.full((config.N_P, 2), 1.0), np.full((config.N_P, 2), 30.0)])
        bundle.map_scores = np.full((2, 3), 0.9)
        indices, _, normalized = filter_map_for_agent(bundle, 0, 0.5, 20.5)
        assert indices == [0]
        np.testing.assert_array_equal(normalized, np.full((1, config.N_P, 2), 1.0))

    def test_bad_thresholds(self, bundle):
        with pytest.raises(ContractError):
            filter_map_for_agent(bundle, 0, 1.5, 10.0)
        with pytest.raises(ContractError):
            filter_map_for_agent(bundle, 0, 0.5, 0.0)

    @pytest.mark.parametrize("tau", [0.0, 0.5, 0.9])
    @pytest.mark.parametrize("mu", [5.0, 20.5, math.inf])
    def test_matches_brute_force(self, rng, config, tau, mu):
        for _ in range(60):
            bundle = random_bundle(rng, config, n_agents=2, n_instances=5)
            j = int(rng.integers(2))
            indices, _, _ = filter_map_for_agent(bundle, j, tau, mu)
            expected = []
            for i in range(bundle.n_instances):
                nearest = min(math.hypot(*(p - bundle.agent_positions[j])) for p in bundle.map_points[i])
                if max(bundle.map_scores[i]) >= tau and nearest <= mu:
                    expected.append(i)
            assert indices == expected

    def test_thresholds_are_inclusive(self, rng, config):
        bundle = random_bundle(rng, config, n_agents=1, n_instances=3)
        bundle.agent_positions = np.zeros((1, 2))
        bundle.map_points = np.stack([np.tile(point, (config.N_P, 1))
                                      for point in ([20.5, 0.0], [20.5 + 1 / 64, 0.0], [0.0, 20.5])])
        bundle.map_scores = np.array([[0.9, 0.0, 0.0], [0.9, 0.0, 0.0], [0.0, 0.8, 0.0]])
        indices, _, _ = filter_map_for_agent(bundle, 0, 0.9, 20.5)
        assert indices == [0]


# =============================================================================
# Map encoding
# =============================================================================

class TestMapEncoding:
    """Test the vectorized subgraph encoder and the position encoding."""

    def test_output_shape(self, rng, bound, config):
        out = encode_map_instances(constant(rng.standard_normal((3, config.N_P, config.C))), bound, config)
        assert out.shape == (3, config.C)

    def test_identical_points_collapse(self, rng, bound, config):
        point = rng.standard_normal(config.C)
        repeated = encode_map_instances(constant(np.tile(point, (1, config.N_P, 1))), bound, config)
        single = encode_map_instances(constant(point.reshape(1, 1, -1)), bound, config)
        np.testing.assert_allclose(repeated.data, single.data, atol=1e-12)

    def test_point_order_invariance(self, rng, bound, config):
        selected = rng.standard_normal((2, config.N_P, config.C))
        perm = rng.permutation(config.N_P)
        out = encode_map_instances(constant(selected), bound, config)
        shuffled = encode_map_instances(constant(selected[:, perm]), bound, config)
        np.testing.assert_allclose(shuffled.data, out.data, atol=1e-12)

    def test_empty_selection(self, bound, config):
        with pytest.raises(ContractError):
            encode_map_instances(constant(np.zeros((0, config.N_P, config.C))), bound, config)

    def test_representative_is_closest_point(self, bound, config):
        rep, pe = map_position_encoding(np.array([[[1.0, 0.0], [3.0, 0.0], [0.5, 0.5]]]), bound, config)
        assert rep.tolist() == [[0.5, 0.5]]
        assert pe.shape == (1, config.C)

    def test_instance_through_agent(self, bound, config):
        rep, _ = map_position_encoding(np.array([[[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]]]), bound, config)
        assert rep.tolist() == [[0.0, 0.0]]

    def test_tie_takes_first_point(self, bound, config):
        rep, _ = map_position_encoding(np.array([[[1.0, 0.0], [0.0, 1.0]]]), bound, config)
        assert rep.tolist() == [[1.0, 0.0]]


# =============================================================================
# Motion-map interaction and decoders
# =============================================================================

class TestMotionMapBlock:
    """Test cross-attention between motion queries and map instances."""

    def test_single_instance_has_unit_weight(self, rng, bound, config):
        q = constant(rng.standard_normal((config.N_MODE, config.C)))
        inst = constant(rng.standard_normal((1, config.C)))
        _, weights = multi_head_attention(q, inst, inst, None, scope(bound, "cross_attn"), config.HEADS,
                                          return_weights=True)
        for w in weights:
            assert np.all(w == 1.0)

    def test_zero_position_encoding(self, rng, bound, config):
        q = constant(rng.standard_normal((config.N_MODE, config.C)))
        inst = constant(rng.standard_normal((3, config.C)))
        without = motion_map_block(q, inst, None, bound, config)
        with_zero = motion_map_block(q, inst, constant(np.zeros((3, config.C))), bound, config)
        np.testing.assert_array_equal(without.data, with_zero.data)

    def test_empty_map_gives_zeros(self, rng, bound, config):
        q = constant(rng.standard_normal((config.N_MODE, config.C)))
        out = motion_map_block(q, constant(np.zeros((0, config.C))), None, bound, config)
        np.testing.assert_array_equal(out.data, np.zeros((config.N_MODE, config.C)))

    def test_position_encoding_shape_mismatch(self, rng, bound, config):
        q = constant(rng.standard_normal((config.N_MODE, config.C)))
        inst = constant(rng.standard_normal((3, config.C)))
        with pytest.raises(DimensionError):
            motion_map_block(q, inst, constant(np.zeros((2, config.C))), bound, config)


class TestDecoders:
    """Test fusion, the motion decoder and the perception heads."""

    def test_fuse_concatenates(self):
        out = fuse_motion_queries(constant([[[1.0]]]), constant([[[2.0]]]))
        assert out.data.tolist() == [[[1.0, 2.0]]]

    def test_fuse_slices_recover_inputs(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
        fused = fuse_motion_queries(constant(a), constant(b))
        np.testing.assert_array_equal(slice_axis(fused, 0, 4).data, a)
        np.testing.assert_array_equal(slice_axis(fused, 4, 8).data, b)

    def test_fuse_shape_mismatch(self):
        with pytest.raises(DimensionError):
            fuse_motion_queries(constant(np.zeros((1, 2, 4))), constant(np.zeros((1, 3, 4))))

    def test_zero_motion_head_gives_zero_offsets(self, rng, params, config):
        arrays = dict(params.arrays)
        for name in arrays:
            if name.startswith("motion_head."):
                arrays[name] = np.zeros_like(arrays[name])
        bound = ModelParams(arrays).bind()
        fused = constant(rng.standard_normal((3, config.N_MODE, 2 * config.C)))
        out = decode_motion(fused, bound, config)
        assert out.shape == (3, config.N_MODE, config.T_F, 2)
        assert np.all(out.data == 0.0)

    def test_zero_class_weights_give_sigmoid_of_bias(self, rng, params, config):
        arrays = dict(params.arrays)
        arrays["map_head.cls.w0"] = np.zeros_like(arrays["map_head.cls.w0"])
        arrays["map_head.cls.b0"] = np.array([-1.0, 0.0, 2.0])
        bound = ModelParams(arrays).bind()
        out = decode_perception(constant(rng.standard_normal((2, config.C))),
                                constant(rng.standard_normal((4, config.N_P, config.C))), bound, config)
        expected = 1.0 / (1.0 + np.exp(-np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_allclose(out.map_scores.data, np.tile(expected, (4, 1)), atol=1e-15)

    def test_perception_shapes(self, rng, bound, config):
        out = decode_perception(constant(rng.standard_normal((2, config.C))),
                                constant(rng.standard_normal((4, config.N_P, config.C))), bound, config)
        assert out.map_points.shape == (4, config.N_P, 2)
        assert out.agent_boxes.shape == (2, 5)
        assert np.all(out.agent_boxes.data[:, 2:4] > 0)


# =============================================================================
# Pipeline
# =============================================================================

class TestPipeline:
    """Test the complete forward pass."""

    def test_output_counts(self, bundle, bound, config):
        preds = full_forward(bundle, None, bound, config, scene_id="x")
        assert len(preds.agents) == bundle.n_agents
        assert len(preds.map) == bundle.n_instances
        assert validate(preds, config) == []

    def test_empty_map_matches_disabled_interaction(self, rng, bound, config):
        bundle = QueryBundle(constant(rng.standard_normal((1, config.C))), np.zeros((1, 2)),
                             constant(np.zeros((0, config.N_P, config.C))), np.zeros((0, config.N_P, 2)),
                             np.zeros((0, 3)))
        out = forward(bundle, bound, config)
        off = forward(bundle, bound, config.with_overrides(MAP_INTERACTION=False))
        assert out.selected == [[]]
        np.testing.assert_array_equal(out.offsets.data, off.offsets.data)
        assert full_forward(bundle, None, bound, config).map == []

    def test_no_agents(self, rng, bound, config):
        bundle = random_bundle(rng, config, n_agents=0, n_instances=2)
        preds = full_forward(bundle, None, bound, config)
        assert preds.agents == []
        assert len(preds.map) == 2

    def test_translation_invariance(self, rng, bound, config):
        for _ in range(20):
            bundle = random_bundle(rng, config)
            shift = rng.integers(-10, 11, size=2).astype(float)
            base = forward(bundle, bound, config)
            moved = forward(bundle.translated(shift), bound, config)
            assert moved.selected == base.selected
            np.testing.assert_array_equal(moved.offsets.data, base.offsets.data)

    def test_far_map_changes_do_not_reach_agent(self, rng, bound, config):
        bundle = random_bundle(rng, config, n_agents=2, n_instances=3, spread=5.0)
        bundle.agent_positions = np.array([[0.0, 0.0], [40.0, 40.0]])
        bundle.map_scores = np.full((3, 3), 0.9)
        far = np.full((config.N_P, 2), 40.0) + rng.uniform(-1, 1, size=(config.N_P, 2))
        points = bundle.map_points.copy()
        points[2] = far
        bundle.map_points = points
        base = forward(bundle, bound, config)
        assert 2 not in base.selected[0] and 2 in base.selected[1]

        points = points.copy()
        points[2] = far + 0.5
        queries = bundle.map_queries.data.copy()
        queries[2] = rng.standard_normal(queries[2].shape)
        changed = QueryBundle(bundle.agent_queries, bundle.agent_positions, constant(queries), points,
                              bundle.map_scores)
        out = forward(changed, bound, config)
        np.testing.assert_array_equal(out.offsets.data[0], base.offsets.data[0])
        assert not np.array_equal(out.offsets.data[1], base.offsets.data[1])

    def test_ablations_run(self, bundle, bound, config):
        for flag in ("AGENT_NORMALIZATION", "AGENT_FILTERING", "MAP_INTERACTION", "INTERACTION_PE"):
            out = forward(bundle, bound, config.with_overrides(**{flag: False}))
            assert out.offsets.shape == (bundle.n_agents, config.N_MODE, config.T_F, 2)

    def test_plain_blocks(self, bundle, config):
        plain = config.with_overrides(PLAIN_BLOCKS=True)
        bound = ModelParams.init(plain, seed=0).bind()
        out = forward(bundle, bound, plain)
        assert np.all(np.isfinite(out.offsets.data))

    def test_bundle_shape_mismatch(self, rng, config):
        with pytest.raises(DimensionError):
            QueryBundle(constant(np.zeros((2, config.C))), np.zeros((3, 2)),
                        constant(np.zeros((1, config.N_P, config.C))), np.zeros((1, config.N_P, 2)),
                        np.zeros((1, 3)))
