"""
Deterministic synthetic scenes, perturbation oracles and query synthesis.

Every random draw comes from a counter-based Philox generator keyed by
(seed, scene index, stream), so any scene regenerates on its own, independent
of the order in which scenes are produced.
"""
import logging
import math
import zlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import Config
from .errors import GenerationError
from .interactor import QueryBundle, encode_trajectory
from .models import (
    AGENT_CLASSES,
    DYNAMIC_AGENT_CLASSES,
    MAP_CLASSES,
    AgentGT,
    GenConfig,
    MapInstanceGT,
    PredAgent,
    PredictionSet,
    PredMapInstance,
    Scene,
)
from .params import BoundParams, layer_sizes, scope
from .tensor import constant, mlp, reshape, take

logger = logging.getLogger(__name__)

STREAM_LAYOUT = 0
STREAM_AGENTS = 1
STREAM_PERTURB = 2
STREAM_QUERIES = 3
STREAM_MAP = 4

DIVIDER, CROSSING, BOUNDARY = 0, 1, 2
CAR, PEDESTRIAN, TRAFFIC_CONE, BARRIER = 0, 1, 2, 3

CURVE_STEP = 0.25  # m between samples of the dense reference curve
SIDEWALK_MARGIN = 1.5
PLACEMENT_TRIES = 100
PEDESTRIAN_SPEED = (0.8, 1.8)


def stream(seed: int, scene_index: int, stream_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, scene_index, stream_id])))


def scene_id_for(seed: int, scene_index: int) -> str:
    return f"s{seed}-{scene_index:06d}"


def _scene_key(scene_id: str) -> int:
    return zlib.crc32(scene_id.encode("utf-8"))


@dataclass
class Road:
    """Dense reference curve of the road (arclength, position, heading)"""

    s: np.ndarray
    xy: np.ndarray
    heading: np.ndarray
    n_lanes: int
    lane_width: float

    def at(self, s: np.ndarray, lateral: float) -> Tuple[np.ndarray, np.ndarray]:
        """Positions and headings at arclengths `s` shifted `lateral` meters to the left"""
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        x = np.interp(s, self.s, self.xy[:, 0])
        y = np.interp(s, self.s, self.xy[:, 1])
        th = np.interp(s, self.s, self.heading)
        pos = np.stack([x - lateral * np.sin(th), y + lateral * np.cos(th)], axis=1)
        return pos, th

    def offset(self, lateral: float) -> np.ndarray:
        return self.at(self.s, lateral)[0]

    @property
    def half_width(self) -> float:
        return 0.5 * self.n_lanes * self.lane_width


# --- Geometry helpers ---

def _inside(points: np.ndarray, half_range: float) -> np.ndarray:
    return np.all(np.abs(points) <= half_range, axis=-1)


def clip_to_range(points: np.ndarray, half_range: float) -> Optional[np.ndarray]:
    """Longest contiguous run of points inside the perception square"""
    mask = _inside(points, half_range)
    best, start, best_span = None, None, (0, 0)
    for i, m in enumerate(np.append(mask, False)):
        if m and start is None:
            start = i
        elif not m and start is not None:
            if i - start > best_span[1] - best_span[0]:
                best_span = (start, i)
            start = None
    if best_span[1] - best_span[0] < 2:
        return best
    return points[best_span[0]:best_span[1]]


def resample_polyline(points: np.ndarray, n_points: int) -> np.ndarray:
    """Exactly n_points spaced evenly by arclength along the polyline"""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], n_points)
    return np.stack([np.interp(targets, s, points[:, 0]), np.interp(targets, s, points[:, 1])], axis=1)


def _polyline_instance(points: np.ndarray, class_id: int, config: Config) -> Optional[MapInstanceGT]:
    clipped = clip_to_range(points, config.HALF_RANGE)
    if clipped is None or np.linalg.norm(clipped[-1] - clipped[0]) < 1.0:
        return None
    resampled = resample_polyline(clipped, config.N_P)
    return MapInstanceGT(class_id=class_id, points=[(float(x), float(y)) for x, y in resampled])


def sample_road(gen_config: GenConfig, rng: np.random.Generator, config: Config) -> Road:
    """Reference curve through the neighbourhood of the ego vehicle"""
    geometry = gen_config.geometry
    if geometry == "mixed":
        geometry = ["straight", "arc", "S-curve"][int(rng.integers(3))]
    length = 3.0 * config.HALF_RANGE
    s = np.arange(-0.5 * length, 0.5 * length + CURVE_STEP, CURVE_STEP)
    theta0 = rng.uniform(-math.pi, math.pi)
    if geometry == "straight":
        heading = np.full_like(s, theta0)
    elif geometry == "arc":
        kappa = rng.uniform(0.005, 0.015) * rng.choice([-1.0, 1.0])
        heading = theta0 + kappa * s
    else:
        amplitude = rng.uniform(0.2, 0.4)
        heading = theta0 + amplitude * np.sin(2.0 * math.pi * s / length)

    origin = rng.uniform(-5.0, 5.0, size=2)
    steps = np.stack([np.cos(heading), np.sin(heading)], axis=1) * CURVE_STEP
    xy = np.cumsum(steps, axis=0)
    xy += origin - xy[np.argmin(np.abs(s))]
    return Road(s=s, xy=xy, heading=heading, n_lanes=gen_config.lanes_per_scene,
                lane_width=gen_config.lane_width)


def build_map(road: Road, gen_config: GenConfig, rng: np.random.Generator, config: Config) -> List[MapInstanceGT]:
    """Dividers between lanes, two boundaries, and transverse crossings"""
    polylines: List[Tuple[np.ndarray, int]] = []
    n, w = road.n_lanes, road.lane_width
    for k in range(1, n):
        polylines.append((road.offset((k - 0.5 * n) * w), DIVIDER))
    for side in (-1.0, 1.0):
        polylines.append((road.offset(side * road.half_width), BOUNDARY))
    for _ in range(gen_config.crossings_per_scene):
        s_c = rng.uniform(-0.25 * config.HALF_RANGE, 0.25 * config.HALF_RANGE)
        lateral = np.linspace(-road.half_width, road.half_width, config.N_P)
        points = np.concatenate([road.at(s_c, d)[0] for d in lateral])
        polylines.append((points, CROSSING))

    instances = []
    for points, class_id in polylines:
        inst = _polyline_instance(points, class_id, config)
        if inst is not None:
            instances.append(inst)
    return instances


# --- Agents ---

def _agent_class(gen_config: GenConfig, rng: np.random.Generator) -> int:
    if rng.random() < gen_config.static_fraction:
        return int(rng.choice([TRAFFIC_CONE, BARRIER]))
    if rng.random() < gen_config.pedestrian_fraction:
        return PEDESTRIAN
    return CAR


def _agent_size(class_id: int, rng: np.random.Generator) -> Tuple[float, float]:
    if class_id == CAR:
        return 4.5 * rng.uniform(0.9, 1.1), 1.9 * rng.uniform(0.9, 1.1)
    if class_id == PEDESTRIAN:
        return 0.6, 0.6
    if class_id == TRAFFIC_CONE:
        return 0.4, 0.4
    return 0.5, 2.0


def _inside_arclengths(road: Road, lateral: float, half_range: float) -> np.ndarray:
    return road.s[_inside(road.offset(lateral), half_range)]


def _dynamic_agent(class_id: int, road: Road, gen_config: GenConfig, rng: np.random.Generator,
                   config: Config, exits: bool) -> Optional[Tuple[np.ndarray, float, np.ndarray]]:
    """Center, yaw and future of a lane-following agent; None when no placement fits"""
    if class_id == CAR:
        lane = int(rng.integers(road.n_lanes))
        lateral = (lane + 0.5 - 0.5 * road.n_lanes) * road.lane_width
        speed = rng.uniform(*gen_config.speed_range)
    else:
        lateral = rng.choice([-1.0, 1.0]) * (road.half_width + SIDEWALK_MARGIN)
        speed = rng.uniform(*PEDESTRIAN_SPEED)
    inside = _inside_arclengths(road, lateral, config.HALF_RANGE)
    if inside.size == 0:
        return None
    travel = speed * config.STEP_SECONDS * config.T_F
    lo, hi = inside.min(), inside.max()
    if exits:
        s0 = rng.uniform(max(lo, hi - travel), hi)
    else:
        if hi - travel < lo:
            return None
        s0 = rng.uniform(lo, hi - travel)
    steps = s0 + speed * config.STEP_SECONDS * np.arange(1, config.T_F + 1)
    center, heading = road.at(s0, lateral)
    future, _ = road.at(steps, lateral)
    return center[0], float(heading[0]), future


def _static_agent(road: Road, rng: np.random.Generator, config: Config) -> Optional[Tuple[np.ndarray, float]]:
    lateral = rng.choice([-1.0, 1.0]) * (road.half_width + 0.5)
    inside = _inside_arclengths(road, lateral, config.HALF_RANGE)
    if inside.size == 0:
        return None
    center, heading = road.at(rng.uniform(inside.min(), inside.max()), lateral)
    return center[0], float(heading[0])


def _far_enough(center: np.ndarray, placed: Sequence[np.ndarray], gap: float) -> bool:
    return all(np.linalg.norm(center - p) >= gap for p in placed)


def place_agents(road: Road, gen_config: GenConfig, rng: np.random.Generator, config: Config) -> List[AgentGT]:
    agents: List[AgentGT] = []
    placed: List[np.ndarray] = []
    for _ in range(gen_config.agents_per_scene):
        class_id = _agent_class(gen_config, rng)
        size = _agent_size(class_id, rng)
        exits = class_id in DYNAMIC_AGENT_CLASSES and rng.random() < gen_config.exit_fraction
        agent = None
        for _ in range(PLACEMENT_TRIES):
            if class_id in DYNAMIC_AGENT_CLASSES:
                sample = _dynamic_agent(class_id, road, gen_config, rng, config, exits)
                if sample is None:
                    continue
                center, yaw, future = sample
                keep = _inside(future, config.HALF_RANGE)
                n_keep = int(np.argmin(keep)) if not keep.all() else len(future)
                complete = n_keep == config.T_F
                if not complete and not exits:
                    continue
                future = future[:n_keep]
            else:
                sample = _static_agent(road, rng, config)
                if sample is None:
                    continue
                center, yaw = sample
                future = np.repeat(center.reshape(1, 2), config.T_F, axis=0)
                complete = True
            if not _inside(center, config.HALF_RANGE):
                continue
            if not _far_enough(center, placed, gen_config.min_agent_gap):
                continue
            agent = AgentGT(class_id=class_id, center=(float(center[0]), float(center[1])), size=size,
                            yaw=yaw, future=[(float(x), float(y)) for x, y in future], complete=complete)
            placed.append(center)
            break
        if agent is None:
            logger.warning(f"Could not place a {AGENT_CLASSES[class_id]} after {PLACEMENT_TRIES} tries")
            continue
        agents.append(agent)
    return agents


def generate_scene(gen_config: GenConfig, scene_index: int, config: Optional[Config] = None) -> Scene:
    """One scene, fully determined by (seed, scene_index)"""
    config = config or Config()
    if gen_config.lanes_per_scene == 0 and gen_config.agents_per_scene > 0:
        raise GenerationError("agents need at least one lane: lanes_per_scene=0 with agents_per_scene > 0")
    scene_id = scene_id_for(gen_config.seed, scene_index)
    if gen_config.lanes_per_scene == 0:
        return Scene(scene_id=scene_id)
    road = sample_road(gen_config, stream(gen_config.seed, scene_index, STREAM_LAYOUT), config)
    map_instances = build_map(road, gen_config, stream(gen_config.seed, scene_index, STREAM_MAP), config)
    agents = place_agents(road, gen_config, stream(gen_config.seed, scene_index, STREAM_AGENTS), config)
    return Scene(scene_id=scene_id, map_instances=map_instances, agents=agents,
                 dynamic_classes=list(DYNAMIC_AGENT_CLASSES))


def generate_scenes(gen_config: GenConfig, num: int, config: Optional[Config] = None) -> List[Scene]:
    scenes = [generate_scene(gen_config, i, config) for i in range(num)]
    logger.info(f"Generated {len(scenes)} scenes (seed={gen_config.seed})")
    return scenes


# --- Perturbation oracle ---

def _one_hot_scores(class_id: int, n_classes: int, eps: float) -> List[float]:
    return [1.0 - eps if c == class_id else eps for c in range(n_classes)]


def _corrupt(class_id: int, n_classes: int, gen_config: GenConfig, rng: np.random.Generator) -> int:
    """Possibly swap the labelled class for a different one"""
    u, other = rng.random(), int(rng.integers(n_classes - 1))
    if u < gen_config.score_corruption_prob:
        return other if other < class_id else other + 1
    return class_id


def gt_offsets(agent: AgentGT, t_f: int) -> np.ndarray:
    """GT future as T_f per-step offsets from the center; short futures repeat their last step"""
    if not agent.future:
        return np.zeros((t_f, 2))
    offsets = encode_trajectory(np.asarray(agent.future), agent.center)
    if len(offsets) < t_f:
        offsets = np.vstack([offsets, np.repeat(offsets[-1:], t_f - len(offsets), axis=0)])
    return offsets[:t_f]


def _false_positive(scene: Scene, gen_config: GenConfig, rng: np.random.Generator, config: Config,
                    level: float) -> Optional[PredAgent]:
    taken = [np.asarray(a.center) for a in scene.agents]
    for _ in range(PLACEMENT_TRIES):
        center = rng.uniform(-config.HALF_RANGE, config.HALF_RANGE, size=2)
        if _far_enough(center, taken, gen_config.fp_min_distance):
            break
    else:
        return None
    class_id = int(rng.choice(DYNAMIC_AGENT_CLASSES))
    heading = rng.uniform(-math.pi, math.pi)
    step = np.array([math.cos(heading), math.sin(heading)]) * rng.uniform(*gen_config.speed_range) * config.STEP_SECONDS
    forecast = np.repeat(step.reshape(1, 1, 2), config.T_F, axis=1).repeat(config.N_MODE, axis=0)
    forecast = forecast + level * gen_config.trajectory_noise * rng.standard_normal(forecast.shape)
    return PredAgent(scores=_one_hot_scores(class_id, len(AGENT_CLASSES), gen_config.score_epsilon),
                     center=(float(center[0]), float(center[1])), size=_agent_size(class_id, rng),
                     yaw=float(heading), forecast=forecast.tolist())


def perturb_to_predictions(scene: Scene, gen_config: GenConfig, noise_level: float,
                           config: Optional[Config] = None) -> PredictionSet:
    """
    Copy the GT into a prediction set with Gaussian noise of std
    noise_level * scale, seeded per scene. With zero noise and no injections
    the result predicts the scene perfectly.
    """
    config = config or Config()
    if noise_level < 0:
        raise ValueError(f"noise level must be >= 0, got {noise_level}")
    rng = stream(gen_config.seed, _scene_key(scene.scene_id), STREAM_PERTURB)
    eps = gen_config.score_epsilon

    map_preds = []
    for inst in scene.map_instances:
        points = np.asarray(inst.points) + noise_level * gen_config.map_point_noise * rng.standard_normal((len(inst.points), 2))
        class_id = _corrupt(inst.class_id, len(MAP_CLASSES), gen_config, rng)
        if rng.random() < gen_config.drop_prob:
            continue
        map_preds.append(PredMapInstance(scores=_one_hot_scores(class_id, len(MAP_CLASSES), eps),
                                         points=[(float(x), float(y)) for x, y in points]))

    agent_preds = []
    for agent in scene.agents:
        center = np.asarray(agent.center) + noise_level * gen_config.center_noise * rng.standard_normal(2)
        jitter = noise_level * gen_config.trajectory_noise * rng.standard_normal((config.N_MODE, config.T_F, 2))
        forecast = gt_offsets(agent, config.T_F)[None, :, :] + jitter
        size = np.asarray(agent.size) * np.exp(0.1 * noise_level * rng.standard_normal(2))
        yaw = agent.yaw + 0.05 * noise_level * rng.standard_normal()
        class_id = _corrupt(agent.class_id, len(AGENT_CLASSES), gen_config, rng)
        if rng.random() < gen_config.drop_prob:
            continue
        agent_preds.append(PredAgent(
            scores=_one_hot_scores(class_id, len(AGENT_CLASSES), eps),
            center=(float(center[0]), float(center[1])),
            size=(float(size[0]), float(size[1])),
            yaw=float(yaw),
            forecast=forecast.tolist(),
        ))

    for _ in range(gen_config.false_positives):
        fp = _false_positive(scene, gen_config, rng, config, noise_level)
        if fp is not None:
            agent_preds.append(fp)
    return PredictionSet(scene_id=scene.scene_id, map=map_preds, agents=agent_preds)


# --- Query synthesis ---

def _agent_speed(agent: AgentGT, step_seconds: float) -> float:
    if not agent.future:
        return 0.0
    return float(np.linalg.norm(np.asarray(agent.future[0]) - np.asarray(agent.center))) / step_seconds


def synth_queries(scene: Scene, params: BoundParams, gen_config: GenConfig,
                  config: Optional[Config] = None) -> QueryBundle:
    """
    Query features built from the GT: learned class embedding plus an MLP
    embedding of the pose (agents) or point coordinates (map), with optional
    seeded noise on positions and features. Gradients reach the embeddings.
    """
    config = config or Config()
    rng = stream(gen_config.seed, _scene_key(scene.scene_id), STREAM_QUERIES)
    sizes = layer_sizes(config)
    r, c = config.HALF_RANGE, config.C
    pos_noise = gen_config.query_noise_level
    feat_noise = gen_config.query_feature_noise

    n_a = len(scene.agents)
    centers = np.asarray([a.center for a in scene.agents], dtype=np.float64).reshape(n_a, 2)
    centers = centers + pos_noise * gen_config.center_noise * rng.standard_normal((n_a, 2))
    pose = np.array([[x / r, y / r, a.yaw / math.pi, _agent_speed(a, config.STEP_SECONDS) / 10.0]
                     for (x, y), a in zip(centers, scene.agents)]).reshape(n_a, 4)
    agent_queries = (take(params["embed.agent_class"], [a.class_id for a in scene.agents], axis=0)
                     + mlp(constant(pose), scope(params, "embed.agent_pose"), sizes["embed.agent_pose"])
                     + feat_noise * rng.standard_normal((n_a, c)))

    n_i = len(scene.map_instances)
    points = np.asarray([m.points for m in scene.map_instances], dtype=np.float64).reshape(n_i, config.N_P, 2)
    points = points + pos_noise * gen_config.map_point_noise * rng.standard_normal(points.shape)
    class_embed = take(params["embed.map_class"], [m.class_id for m in scene.map_instances], axis=0)
    map_queries = (reshape(class_embed, (n_i, 1, c))
                   + mlp(constant(points / r), scope(params, "embed.map_point"), sizes["embed.map_point"])
                   + feat_noise * rng.standard_normal((n_i, config.N_P, c)))
    scores = np.array([_one_hot_scores(m.class_id, len(MAP_CLASSES), gen_config.score_epsilon)
                       for m in scene.map_instances]).reshape(n_i, len(MAP_CLASSES))

    return QueryBundle(agent_queries=agent_queries, agent_positions=centers, map_queries=map_queries,
                       map_points=points, map_scores=scores)
