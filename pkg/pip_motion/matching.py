"""
Set matching between predictions and ground truth, and the multi-task loss.

Matchings are computed on plain arrays and are treated as constants in the
backward pass; only the losses evaluated under a fixed matching are
differentiable.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import Config
from .errors import ContractError, DimensionError
from .interactor import ForwardOutputs
from .models import AgentGT, MapInstanceGT, Scene
from .tensor import (
    DiffValue,
    abs_,
    as_value,
    clip,
    constant,
    cumsum_axis,
    log,
    mul,
    pow_scalar,
    reshape,
    slice_axis,
    sum_all,
    take,
)

logger = logging.getLogger(__name__)

# Stand-in for an infinite matching cost
COST_SENTINEL = 1e9

LOSS_NAMES = ("L_det_cls", "L_det_reg", "L_map_cls", "L_map_reg", "L_mot_reg")


@dataclass(frozen=True)
class Assignment:
    """Matched (prediction index, ground-truth index) pairs"""

    pairs: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        preds = [p for p, _ in self.pairs]
        gts = [g for _, g in self.pairs]
        if len(set(preds)) != len(preds) or len(set(gts)) != len(gts):
            raise ContractError(f"assignment uses an index twice: {self.pairs}")

    def __len__(self) -> int:
        return len(self.pairs)

    def gt_of(self) -> Dict[int, int]:
        return dict(self.pairs)


@dataclass(frozen=True)
class PointMatching:
    """Order in which GT points are paired with predicted points"""

    orientation: Literal["forward", "reversed"]
    n_points: int

    @property
    def order(self) -> np.ndarray:
        """order[k] is the GT point index paired with predicted point k"""
        idx = np.arange(self.n_points)
        return idx if self.orientation == "forward" else idx[::-1]


@dataclass
class SceneMatchings:
    """All discrete decisions of one loss evaluation, frozen for backward"""

    map_assignment: Assignment
    point_matchings: List[PointMatching]
    agent_assignment: Assignment
    best_modes: Dict[int, int] = field(default_factory=dict)


@dataclass
class LossComponents:
    det_cls: DiffValue
    det_reg: DiffValue
    map_cls: DiffValue
    map_reg: DiffValue
    mot_reg: DiffValue

    def values(self) -> List[DiffValue]:
        return [self.det_cls, self.det_reg, self.map_cls, self.map_reg, self.mot_reg]

    def as_floats(self) -> Dict[str, float]:
        return {name: float(v.data) for name, v in zip(LOSS_NAMES, self.values())}


# --- Assignment ---

def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-total-cost assignment of min(m, n) pairs; infinite costs become a large sentinel"""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"cost must be a matrix, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ContractError("cost matrix contains NaN")
    if cost.size == 0:
        return Assignment()
    rows, cols = linear_sum_assignment(np.where(np.isfinite(cost), cost, COST_SENTINEL))
    return Assignment(tuple((int(r), int(c)) for r, c in zip(rows, cols)))


def match_points(pred_points: np.ndarray, gt_points: np.ndarray) -> Tuple[PointMatching, float]:
    """Forward or reversed GT order, whichever has the smaller summed Manhattan distance"""
    pred_points = np.asarray(pred_points, dtype=np.float64)
    gt_points = np.asarray(gt_points, dtype=np.float64)
    if pred_points.shape != gt_points.shape:
        raise DimensionError(f"point sets differ in shape: {pred_points.shape} vs {gt_points.shape}")
    forward = float(np.abs(pred_points - gt_points).sum())
    backward = float(np.abs(pred_points - gt_points[::-1]).sum())
    n = pred_points.shape[0]
    if backward < forward:
        return PointMatching("reversed", n), backward
    return PointMatching("forward", n), forward


def match_map_instances(pred_scores: np.ndarray, pred_points: np.ndarray,
                        gt_map: Sequence[MapInstanceGT], config: Config) -> Tuple[Assignment, List[PointMatching]]:
    """
    Hungarian over (1 - score of the GT class) + mean per-point Manhattan
    cost. Returns the assignment and the point matching of each pair.
    """
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    pred_points = np.asarray(pred_points, dtype=np.float64)
    m, n = len(pred_scores), len(gt_map)
    cost = np.zeros((m, n))
    orientations: Dict[Tuple[int, int], PointMatching] = {}
    for j, gt in enumerate(gt_map):
        gt_pts = np.asarray(gt.points, dtype=np.float64)
        for i in range(m):
            pm, c = match_points(pred_points[i], gt_pts)
            orientations[(i, j)] = pm
            cost[i, j] = (config.MATCH_CLS_WEIGHT * (1.0 - pred_scores[i, gt.class_id])
                          + config.MATCH_GEO_WEIGHT * c / len(gt_pts))
    assignment = hungarian(cost)
    return assignment, [orientations[p] for p in assignment.pairs]


def match_agents(pred_scores: np.ndarray, pred_centers: np.ndarray, gt_agents: Sequence[AgentGT],
                 config: Config) -> Assignment:
    """Hungarian over (1 - score of the GT class) + L1 center distance"""
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    pred_centers = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 2)
    cost = np.zeros((len(pred_scores), len(gt_agents)))
    for j, gt in enumerate(gt_agents):
        l1 = np.abs(pred_centers - np.asarray(gt.center)).sum(axis=1)
        cost[:, j] = config.MATCH_CLS_WEIGHT * (1.0 - pred_scores[:, gt.class_id]) + config.MATCH_GEO_WEIGHT * l1
    return hungarian(cost)


def select_best_modes(offsets: np.ndarray, gt_agents: Sequence[AgentGT], assignment: Assignment,
                      dynamic_classes: Sequence[int], config: Config) -> Dict[int, int]:
    """Mode with the smallest final displacement for each eligible matched agent"""
    best: Dict[int, int] = {}
    for i, j in assignment.pairs:
        gt = gt_agents[j]
        if gt.class_id not in dynamic_classes or not gt.complete or len(gt.future) != config.T_F:
            continue
        final = np.asarray(gt.center) + offsets[i].sum(axis=1)
        fde = np.linalg.norm(final - np.asarray(gt.future[-1]), axis=-1)
        best[i] = int(np.argmin(fde))
    return best


def compute_matchings(outputs: ForwardOutputs, scene: Scene, config: Config) -> SceneMatchings:
    p = outputs.perception
    map_assignment, point_matchings = match_map_instances(
        p.map_scores.data, p.map_points.data, scene.map_instances, config)
    agent_assignment = match_agents(p.agent_scores.data, p.agent_boxes.data[:, :2], scene.agents, config)
    best = select_best_modes(outputs.offsets.data, scene.agents, agent_assignment,
                             scene.dynamic_classes, config)
    return SceneMatchings(map_assignment, point_matchings, agent_assignment, best)


# --- Losses ---

def focal_loss(scores: DiffValue, targets: np.ndarray, alpha: float, gamma: float) -> DiffValue:
    """One-vs-all sigmoid focal loss, summed over every entry"""
    scores = as_value(scores)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != scores.shape:
        raise DimensionError(f"targets {targets.shape} do not match scores {scores.shape}")
    if scores.data.size == 0:
        return constant(0.0)
    p = clip(scores, 1e-7, 1.0 - 1e-7)
    q = 1.0 - p
    positive = mul(pow_scalar(q, gamma) * log(p), -alpha)
    negative = mul(pow_scalar(p, gamma) * log(q), -(1.0 - alpha))
    return sum_all(positive * targets + negative * (1.0 - targets))


def _class_targets(n_pred: int, n_classes: int, assignment: Assignment, gt_classes: Sequence[int]) -> np.ndarray:
    targets = np.zeros((n_pred, n_classes))
    for i, j in assignment.pairs:
        targets[i, gt_classes[j]] = 1.0
    return targets


def map_loss(map_scores: DiffValue, map_points: DiffValue, gt_map: Sequence[MapInstanceGT],
             assignment: Assignment, point_matchings: Sequence[PointMatching],
             config: Config) -> Tuple[DiffValue, DiffValue]:
    """Focal classification over all predictions; Manhattan point regression over matched pairs"""
    targets = _class_targets(map_scores.shape[0], config.n_map_classes, assignment,
                             [g.class_id for g in gt_map])
    cls = focal_loss(map_scores, targets, config.FOCAL_ALPHA, config.FOCAL_GAMMA)
    if not assignment.pairs:
        return cls, constant(0.0)
    pred_idx = [i for i, _ in assignment.pairs]
    gt_pts = np.stack([np.asarray(gt_map[j].points, dtype=np.float64)[pm.order]
                       for (_, j), pm in zip(assignment.pairs, point_matchings)])
    reg = sum_all(abs_(take(map_points, pred_idx, axis=0) - gt_pts))
    return cls, reg


def box_vector(agent: AgentGT) -> np.ndarray:
    return np.array([agent.center[0], agent.center[1], agent.size[0], agent.size[1], agent.yaw])


def det_loss(agent_scores: DiffValue, agent_boxes: DiffValue, gt_agents: Sequence[AgentGT],
             assignment: Assignment, config: Config) -> Tuple[DiffValue, DiffValue]:
    """Focal classification over all predictions; L1 box regression over matched pairs"""
    targets = _class_targets(agent_scores.shape[0], config.n_agent_classes, assignment,
                             [g.class_id for g in gt_agents])
    cls = focal_loss(agent_scores, targets, config.FOCAL_ALPHA, config.FOCAL_GAMMA)
    if not assignment.pairs:
        return cls, constant(0.0)
    pred_idx = [i for i, _ in assignment.pairs]
    gt_boxes = np.stack([box_vector(gt_agents[j]) for _, j in assignment.pairs])
    reg = sum_all(abs_(take(agent_boxes, pred_idx, axis=0) - gt_boxes))
    return cls, reg


def motion_loss(offsets: DiffValue, gt_agents: Sequence[AgentGT], assignment: Assignment,
                dynamic_classes: Sequence[int], config: Config,
                best_modes: Optional[Dict[int, int]] = None) -> DiffValue:
    """
    Winner-take-all L1 over the steps of the mode with the smallest final
    displacement, for matched agents of a dynamic class with a complete future.
    Forecasts are accumulated from the matched GT center.
    """
    if best_modes is None:
        best_modes = select_best_modes(offsets.data, gt_agents, assignment, dynamic_classes, config)
    total = constant(0.0)
    n_mode, t_f = offsets.shape[1], offsets.shape[2]
    for i, j in assignment.pairs:
        if i not in best_modes:
            continue
        gt = gt_agents[j]
        k = best_modes[i]
        mode = reshape(slice_axis(slice_axis(offsets, i, i + 1, axis=0), k, k + 1, axis=1), (t_f, 2))
        trajectory = cumsum_axis(mode, axis=0) + np.asarray(gt.center, dtype=np.float64)
        total = total + sum_all(abs_(trajectory - np.asarray(gt.future, dtype=np.float64)))
    return total


def total_loss(components: Union[LossComponents, Sequence], weights: Sequence[float]) -> DiffValue:
    """Weighted sum of (det_cls, det_reg, map_cls, map_reg, mot_reg)"""
    values = components.values() if isinstance(components, LossComponents) else list(components)
    if len(values) != 5 or len(weights) != 5:
        raise ContractError(f"expected five loss components and weights, got {len(values)} and {len(weights)}")
    total = constant(0.0)
    for w, v in zip(weights, values):
        total = total + mul(as_value(v), float(w))
    return total


def scene_losses(outputs: ForwardOutputs, scene: Scene, config: Config,
                 matchings: Optional[SceneMatchings] = None) -> Tuple[LossComponents, SceneMatchings]:
    """All five loss components of one scene; matchings are recomputed unless given"""
    if matchings is None:
        matchings = compute_matchings(outputs, scene, config)
    p = outputs.perception
    det_cls, det_reg = det_loss(p.agent_scores, p.agent_boxes, scene.agents, matchings.agent_assignment, config)
    map_cls, map_reg = map_loss(p.map_scores, p.map_points, scene.map_instances,
                                matchings.map_assignment, matchings.point_matchings, config)
    mot = motion_loss(outputs.offsets, scene.agents, matchings.agent_assignment, scene.dynamic_classes,
                      config, matchings.best_modes)
    return LossComponents(det_cls, det_reg, map_cls, map_reg, mot), matchings
