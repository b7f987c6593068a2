"""
Motion interactor and decoder heads.

Agent queries are combined with mode queries into motion queries, which
interact with each other (self-attention block) and with each agent's own,
normalized and filtered view of the predicted map (map subgraph encoder,
representative-point position encoding, cross-attention block). The two
branches are concatenated along channels and decoded into per-step offsets.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np

from .config import Config
from .errors import ContractError, DimensionError
from .models import PredAgent, PredictionSet, PredMapInstance
from .params import BoundParams, layer_sizes, scope
from .tensor import (
    DiffValue,
    broadcast_to,
    concat,
    constant,
    layer_norm,
    maxpool_axis,
    mlp,
    mul,
    multi_head_attention,
    relu,
    reshape,
    sigmoid,
    slice_axis,
    softplus,
    stack,
    take,
    zeros,
)

logger = logging.getLogger(__name__)


@dataclass
class QueryBundle:
    """Query features and decoded geometry at interaction time"""

    agent_queries: DiffValue      # N_A x C
    agent_positions: np.ndarray   # N_A x 2
    map_queries: DiffValue        # N_I x N_P x C
    map_points: np.ndarray        # N_I x N_P x 2
    map_scores: np.ndarray        # N_I x n_map_classes

    def __post_init__(self):
        self.agent_positions = np.asarray(self.agent_positions, dtype=np.float64).reshape(-1, 2)
        n_a = self.agent_queries.shape[0]
        if self.agent_queries.data.ndim != 2 or self.agent_positions.shape[0] != n_a:
            raise DimensionError(f"agent queries {self.agent_queries.shape} and positions "
                                 f"{self.agent_positions.shape} disagree")
        if self.map_queries.data.ndim != 3:
            raise DimensionError(f"map queries must be N_I x N_P x C, got {self.map_queries.shape}")
        n_i, n_p, _ = self.map_queries.shape
        self.map_points = np.asarray(self.map_points, dtype=np.float64)
        self.map_scores = np.asarray(self.map_scores, dtype=np.float64)
        if self.map_points.shape != (n_i, n_p, 2):
            raise DimensionError(f"map points {self.map_points.shape} disagree with queries "
                                 f"{self.map_queries.shape}")
        if self.map_scores.ndim != 2 or self.map_scores.shape[0] != n_i:
            raise DimensionError(f"map scores {self.map_scores.shape} disagree with {n_i} instances")
        if self.agent_queries.shape[1] != self.map_queries.shape[2]:
            raise DimensionError(f"agent and map query channels differ: {self.agent_queries.shape[1]} "
                                 f"vs {self.map_queries.shape[2]}")

    @property
    def n_agents(self) -> int:
        return self.agent_queries.shape[0]

    @property
    def n_instances(self) -> int:
        return self.map_queries.shape[0]

    def translated(self, offset: Sequence[float]) -> "QueryBundle":
        """Same features with every coordinate shifted by `offset`"""
        t = np.asarray(offset, dtype=np.float64)
        return QueryBundle(self.agent_queries, self.agent_positions + t, self.map_queries,
                           self.map_points + t, self.map_scores)


@dataclass
class ModeBank:
    """Mode queries shared by every agent"""

    mode_queries: DiffValue  # N_mode x C

    @classmethod
    def from_params(cls, params: BoundParams) -> "ModeBank":
        return cls(params["mode_queries"])

    def max_overlap(self) -> float:
        """Largest |<m_i, m_j>| over distinct rows"""
        gram = self.mode_queries.data @ self.mode_queries.data.T
        np.fill_diagonal(gram, 0.0)
        return float(np.abs(gram).max()) if gram.size else 0.0


@dataclass
class PerceptionOutputs:
    map_scores: DiffValue   # N_I x n_map_classes, sigmoid
    map_points: DiffValue   # N_I x N_P x 2, meters
    agent_scores: DiffValue  # N_A x n_agent_classes, sigmoid
    agent_boxes: DiffValue  # N_A x 5: cx, cy, length, width, yaw


@dataclass
class ForwardOutputs:
    perception: PerceptionOutputs
    offsets: DiffValue                 # N_A x N_mode x T_f x 2
    selected: List[List[int]] = field(default_factory=list)


# --- Motion queries ---

def form_motion_queries(agent_queries: DiffValue, modes: ModeBank) -> DiffValue:
    """out[i][j] = agent_queries[i] + mode_queries[j]"""
    m = modes.mode_queries
    if agent_queries.data.ndim != 2 or m.data.ndim != 2 or agent_queries.shape[1] != m.shape[1]:
        raise DimensionError(f"agent queries {agent_queries.shape} and mode queries {m.shape} "
                             f"need matching channels")
    n_a, c = agent_queries.shape
    return reshape(agent_queries, (n_a, 1, c)) + reshape(m, (1, m.shape[0], c))


def _transformer_block(x: DiffValue, attended: DiffValue, params: BoundParams, prefix: str,
                       config: Config) -> DiffValue:
    ffn = scope(params, f"{prefix}_ffn")
    sizes = layer_sizes(config)[f"{prefix}_ffn"]
    if config.PLAIN_BLOCKS:
        return mlp(attended, ffn, sizes)
    h = layer_norm(x + attended, params[f"{prefix}_ln1.gamma"], params[f"{prefix}_ln1.beta"])
    return layer_norm(h + mlp(h, ffn, sizes), params[f"{prefix}_ln2.gamma"], params[f"{prefix}_ln2.beta"])


def motion_self_block(q_motion: DiffValue, params: BoundParams, config: Config) -> DiffValue:
    """Joint self-attention over every (agent, mode) motion query"""
    n_a, n_mode, c = q_motion.shape
    if n_a * n_mode == 0:
        return q_motion
    flat = reshape(q_motion, (n_a * n_mode, c))
    attended = multi_head_attention(flat, flat, flat, None, scope(params, "self_attn"), config.HEADS)
    return reshape(_transformer_block(flat, attended, params, "self", config), (n_a, n_mode, c))


# --- Agent-wise normalization and filtering ---

def normalize_map_for_agent(map_points: np.ndarray, agent_position: Sequence[float]) -> np.ndarray:
    """Map coordinates in the agent-centric frame: p_M - p_A"""
    return np.asarray(map_points, dtype=np.float64) - np.asarray(agent_position, dtype=np.float64)


def encode_trajectory(positions: np.ndarray, anchor: Sequence[float]) -> np.ndarray:
    """Absolute positions -> per-step offsets, with the anchor as step -1"""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 2 or positions.shape[0] < 1:
        raise DimensionError(f"trajectory must be T x 2 with T >= 1, got {positions.shape}")
    prev = np.vstack([np.asarray(anchor, dtype=np.float64).reshape(1, 2), positions[:-1]])
    return positions - prev


def decode_offsets(offsets: np.ndarray, anchor: Sequence[float]) -> np.ndarray:
    """Per-step offsets -> absolute positions by accumulation from the anchor"""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape[-1] != 2 or offsets.ndim < 2 or offsets.shape[-2] < 1:
        raise DimensionError(f"offsets must be ... x T x 2 with T >= 1, got {offsets.shape}")
    return np.asarray(anchor, dtype=np.float64) + np.cumsum(offsets, axis=-2)


def trajectory_codec(values: np.ndarray, direction: Literal["encode", "decode"],
                     anchor: Sequence[float], steps: Optional[int] = None) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if steps is not None and (values.ndim < 2 or values.shape[-2] != steps):
        raise DimensionError(f"expected {steps} steps, got shape {values.shape}")
    if direction == "encode":
        return encode_trajectory(values, anchor)
    if direction == "decode":
        return decode_offsets(values, anchor)
    raise ContractError(f"unknown codec direction {direction!r}")


def filter_map_for_agent(bundle: QueryBundle, agent_index: int, tau: float,
                         mu: float) -> Tuple[List[int], DiffValue, np.ndarray]:
    """
    Keep instance i iff its max class score >= tau and its closest point lies
    within mu of the agent. Original instance order is preserved.
    """
    if not 0.0 <= tau <= 1.0 or not mu > 0:
        raise ContractError(f"filter thresholds out of range: tau={tau}, mu={mu}")
    normalized = normalize_map_for_agent(bundle.map_points, bundle.agent_positions[agent_index])
    if bundle.n_instances == 0:
        return [], bundle.map_queries, normalized
    confident = bundle.map_scores.max(axis=1) >= tau
    near = np.linalg.norm(normalized, axis=-1).min(axis=1) <= mu
    indices = [int(i) for i in np.flatnonzero(confident & near)]
    return indices, take(bundle.map_queries, indices, axis=0), normalized[indices]


# --- Map encoding ---

def encode_map_instances(selected: DiffValue, params: BoundParams, config: Config) -> DiffValue:
    """
    Three subgraph layers (per-point MLP, instance max-pool, pooled feature
    concatenated back onto every point) and a final max-pool per instance.
    """
    if selected.data.ndim != 3 or selected.shape[0] == 0:
        raise ContractError(f"map encoding needs at least one instance, got {selected.shape}")
    n_sel, n_p, _ = selected.shape
    sizes = layer_sizes(config)
    x = selected
    for layer in range(3):
        h = relu(mlp(x, scope(params, f"subgraph.{layer}"), sizes[f"subgraph.{layer}"]))
        pooled = reshape(maxpool_axis(h, axis=1), (n_sel, 1, h.shape[-1]))
        x = concat([h, broadcast_to(pooled, h.shape)], axis=-1)
    return maxpool_axis(x, axis=1)


def map_position_encoding(points: np.ndarray, params: BoundParams, config: Config,
                          agent_position: Sequence[float] = (0.0, 0.0)) -> Tuple[np.ndarray, DiffValue]:
    """Closest point of each instance to the agent, embedded by the PE MLP"""
    points = np.asarray(points, dtype=np.float64)
    dist = np.linalg.norm(points - np.asarray(agent_position, dtype=np.float64), axis=-1)
    closest = np.argmin(dist, axis=1)
    representative = points[np.arange(points.shape[0]), closest]
    pe = mlp(constant(representative), scope(params, "pe"), layer_sizes(config)["pe"])
    return representative, pe


# --- Motion-map interaction ---

def motion_map_block(q_sa_agent: DiffValue, instance_queries: Optional[DiffValue],
                     pe: Optional[DiffValue], params: BoundParams, config: Config) -> DiffValue:
    """Cross-attention of one agent's motion queries over its filtered map instances"""
    if instance_queries is None or instance_queries.shape[0] == 0:
        return zeros(q_sa_agent.shape)
    if pe is not None and pe.shape != instance_queries.shape:
        raise DimensionError(f"position encoding {pe.shape} does not match instances {instance_queries.shape}")
    attended = multi_head_attention(q_sa_agent, instance_queries, instance_queries, pe,
                                    scope(params, "cross_attn"), config.HEADS)
    return _transformer_block(q_sa_agent, attended, params, "cross", config)


def fuse_motion_queries(q_sa: DiffValue, q_ca: DiffValue) -> DiffValue:
    if q_sa.shape != q_ca.shape:
        raise DimensionError(f"cannot fuse {q_sa.shape} with {q_ca.shape}")
    return concat([q_sa, q_ca], axis=-1)


# --- Decoders ---

def decode_motion(fused: DiffValue, params: BoundParams, config: Config) -> DiffValue:
    """Per-step offsets N_A x N_mode x T_f x 2"""
    n_a, n_mode, _ = fused.shape
    out = mlp(fused, scope(params, "motion_head"), layer_sizes(config)["motion_head"])
    return reshape(out, (n_a, n_mode, config.T_F, 2))


def decode_perception(agent_queries: DiffValue, map_queries: DiffValue, params: BoundParams,
                      config: Config) -> PerceptionOutputs:
    """
    Classification (sigmoid) and regression branches for map instances and
    agents. Coordinates are regressed in units of the half perception range.
    """
    sizes = layer_sizes(config)
    n_i = map_queries.shape[0]
    if n_i == 0:
        map_scores = zeros((0, sizes["map_head.cls"][-1]))
        map_points = zeros((0, config.N_P, 2))
    else:
        instance = maxpool_axis(map_queries, axis=1)
        map_scores = sigmoid(mlp(instance, scope(params, "map_head.cls"), sizes["map_head.cls"]))
        map_points = mul(mlp(map_queries, scope(params, "map_head.reg"), sizes["map_head.reg"]),
                         config.HALF_RANGE)

    agent_scores = sigmoid(mlp(agent_queries, scope(params, "det_head.cls"), sizes["det_head.cls"]))
    raw = mlp(agent_queries, scope(params, "det_head.reg"), sizes["det_head.reg"])
    center = mul(slice_axis(raw, 0, 2), config.HALF_RANGE)
    size = softplus(slice_axis(raw, 2, 4))
    yaw = slice_axis(raw, 4, 5)
    return PerceptionOutputs(map_scores, map_points, agent_scores, concat([center, size, yaw], axis=-1))


# --- Pipeline ---

def _cross_branch(bundle: QueryBundle, j: int, q_sa_agent: DiffValue, params: BoundParams,
                  config: Config) -> Tuple[DiffValue, List[int]]:
    if not config.MAP_INTERACTION:
        return zeros(q_sa_agent.shape), []
    tau, mu = (config.TAU, config.MU) if config.AGENT_FILTERING else (0.0, math.inf)
    indices, selected, normalized = filter_map_for_agent(bundle, j, tau, mu)
    if not indices:
        return zeros(q_sa_agent.shape), indices
    instances = encode_map_instances(selected, params, config)
    pe = None
    if config.INTERACTION_PE:
        if config.AGENT_NORMALIZATION:
            _, pe = map_position_encoding(normalized, params, config)
        else:
            _, pe = map_position_encoding(bundle.map_points[indices], params, config,
                                          agent_position=bundle.agent_positions[j])
    return motion_map_block(q_sa_agent, instances, pe, params, config), indices


def forward(bundle: QueryBundle, params: BoundParams, config: Config,
            modes: Optional[ModeBank] = None) -> ForwardOutputs:
    """Differentiable pipeline; outputs stay DiffValues for the losses"""
    perception = decode_perception(bundle.agent_queries, bundle.map_queries, params, config)
    modes = modes or ModeBank.from_params(params)
    q_motion = form_motion_queries(bundle.agent_queries, modes)
    q_sa = motion_self_block(q_motion, params, config)

    n_a, n_mode, c = q_sa.shape
    rows, selected = [], []
    for j in range(n_a):
        row = reshape(slice_axis(q_sa, j, j + 1, axis=0), (n_mode, c))
        q_ca, indices = _cross_branch(bundle, j, row, params, config)
        rows.append(q_ca)
        selected.append(indices)
    q_ca = stack(rows, axis=0) if rows else zeros((0, n_mode, c))

    offsets = decode_motion(fuse_motion_queries(q_sa, q_ca), params, config)
    return ForwardOutputs(perception, offsets, selected)


def to_prediction_set(outputs: ForwardOutputs, scene_id: str) -> PredictionSet:
    p = outputs.perception
    map_instances = [
        PredMapInstance(scores=[float(s) for s in scores],
                        points=[(float(x), float(y)) for x, y in points])
        for scores, points in zip(p.map_scores.data, p.map_points.data)
    ]
    agents = []
    for scores, box, forecast in zip(p.agent_scores.data, p.agent_boxes.data, outputs.offsets.data):
        agents.append(PredAgent(
            scores=[float(s) for s in scores],
            center=(float(box[0]), float(box[1])),
            size=(float(box[2]), float(box[3])),
            yaw=float(box[4]),
            forecast=[[(float(x), float(y)) for x, y in mode] for mode in forecast],
        ))
    return PredictionSet(scene_id=scene_id, map=map_instances, agents=agents)


def full_forward(bundle: QueryBundle, modes: Optional[ModeBank], params: BoundParams, config: Config,
                 scene_id: str = "") -> PredictionSet:
    """Inference entry point: the whole pipeline packaged as a PredictionSet"""
    return to_prediction_set(forward(bundle, params, config, modes), scene_id)
