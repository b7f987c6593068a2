"""
End-to-end evaluation: EPA, minADE / minFDE / miss rate, chamfer map AP and
center-distance detection AP.

Per-scene work is independent and may be fanned out with joblib; aggregation
happens afterwards in scene order with integer counts and math.fsum.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial.distance import cdist

from .config import Config
from .errors import ValidationFailure
from .matching import hungarian
from .models import (
    AGENT_CLASSES,
    MAP_CLASSES,
    AgentGT,
    ApSummary,
    MapInstanceGT,
    MetricsReport,
    PredAgent,
    PredictionSet,
    PredMapInstance,
    Scene,
    SceneMetrics,
    Violation,
)

logger = logging.getLogger(__name__)

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class DisplacementSummary:
    min_ade: Optional[float]
    min_fde: Optional[float]
    miss_rate: Optional[float]
    n_valid: int


@dataclass
class SceneEpa:
    """EPA counts of one scene and the matched (prediction, GT) pairs"""

    n_gt: int
    n_pred: int
    n_match: int
    n_hit: int
    pairs: List[Tuple[int, int]] = field(default_factory=list)
    # class id -> [n_gt, n_pred, n_match, n_hit]
    class_counts: Dict[int, List[int]] = field(default_factory=dict)

    @property
    def n_fp(self) -> int:
        return self.n_pred - self.n_match


# --- Displacement ---

def forecast_positions(pred: PredAgent) -> np.ndarray:
    """Absolute N_mode x T_f x 2 trajectories anchored at the predicted center"""
    offsets = np.asarray(pred.forecast, dtype=np.float64)
    return np.asarray(pred.center, dtype=np.float64) + np.cumsum(offsets, axis=1)


def agent_displacement(pred: PredAgent, gt: AgentGT) -> Tuple[float, float]:
    """(minADE, minFDE) over modes for one agent with a complete future"""
    err = np.linalg.norm(forecast_positions(pred) - np.asarray(gt.future, dtype=np.float64), axis=-1)
    return float(err.mean(axis=1).min()), float(err[:, -1].min())


def displacement_metrics(pairs: Sequence[Tuple[PredAgent, AgentGT]], config: Config) -> DisplacementSummary:
    """Mean minADE / minFDE and miss rate over matched pairs whose GT future is complete"""
    ades, fdes = [], []
    for pred, gt in pairs:
        if not gt.complete or len(gt.future) != config.T_F:
            continue
        ade, fde = agent_displacement(pred, gt)
        ades.append(ade)
        fdes.append(fde)
    n = len(ades)
    if n == 0:
        return DisplacementSummary(None, None, None, 0)
    misses = sum(1 for f in fdes if f > config.TAU_EPA)
    return DisplacementSummary(math.fsum(ades) / n, math.fsum(fdes) / n, misses / n, n)


# --- EPA ---

def _predicted_class(scores: Sequence[float]) -> Tuple[int, float]:
    c = int(np.argmax(scores))
    return c, float(scores[c])


def counted_predictions(preds: Sequence[PredAgent], config: Config) -> List[int]:
    """Indices of predictions of an evaluated class scoring at least the threshold"""
    out = []
    for i, p in enumerate(preds):
        c, s = _predicted_class(p.scores)
        if c in config.MOTION_EVAL_CLASSES and s >= config.SCORE_THRESHOLD:
            out.append(i)
    return out


def _resolve_greedy(cost: np.ndarray) -> List[Tuple[int, int]]:
    """Ascending-cost resolution, each GT and each prediction used once; returns (gt, pred) pairs"""
    candidates = sorted((cost[g, p], g, p) for g, p in zip(*np.nonzero(np.isfinite(cost))))
    used_g, used_p, pairs = set(), set(), []
    for _, g, p in candidates:
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        pairs.append((int(g), int(p)))
    return pairs


def epa_scene(preds: Sequence[PredAgent], gts: Sequence[AgentGT], config: Config) -> SceneEpa:
    """
    Match counted predictions to GT of the same class by center distance
    within tau_EPA and count hits. A prediction's class is its argmax score.
    """
    gt_idx = [j for j, g in enumerate(gts) if g.class_id in config.MOTION_EVAL_CLASSES]
    pred_idx = counted_predictions(preds, config)
    pred_class = {i: _predicted_class(preds[i].scores)[0] for i in pred_idx}
    cost = np.full((len(gt_idx), len(pred_idx)), math.inf)
    for a, j in enumerate(gt_idx):
        for b, i in enumerate(pred_idx):
            if pred_class[i] != gts[j].class_id:
                continue
            d = float(np.hypot(*(np.asarray(preds[i].center) - np.asarray(gts[j].center))))
            if d <= config.TAU_EPA:
                cost[a, b] = d

    if config.EPA_MATCHING == "hungarian":
        assignment = hungarian(cost.T)
        local = [(g, p) for p, g in assignment.pairs if math.isfinite(cost[g, p])]
    else:
        local = _resolve_greedy(cost)

    class_counts = {c: [0, 0, 0, 0] for c in config.MOTION_EVAL_CLASSES}
    for j in gt_idx:
        class_counts[gts[j].class_id][0] += 1
    for i in pred_idx:
        class_counts[pred_class[i]][1] += 1

    pairs, hits = [], 0
    for a, b in sorted(local):
        i, j = pred_idx[b], gt_idx[a]
        pairs.append((i, j))
        gt = gts[j]
        class_counts[gt.class_id][2] += 1
        if gt.complete and len(gt.future) == config.T_F and agent_displacement(preds[i], gt)[1] <= config.TAU_EPA:
            hits += 1
            class_counts[gt.class_id][3] += 1
    return SceneEpa(len(gt_idx), len(pred_idx), len(pairs), hits, pairs, class_counts)


def epa(pred_sets: Sequence[Sequence[PredAgent]], gt_sets: Sequence[Sequence[AgentGT]],
        config: Config) -> Tuple[Optional[float], List[SceneEpa]]:
    """(hits - alpha * false positives) / N_GT with counts summed over scenes"""
    scenes = [epa_scene(p, g, config) for p, g in zip(pred_sets, gt_sets)]
    return _epa_from_counts(scenes, config.ALPHA), scenes


def _epa_from_counts(scenes: Sequence[SceneEpa], alpha: float) -> Optional[float]:
    n_gt = sum(s.n_gt for s in scenes)
    if n_gt == 0:
        return None
    return (sum(s.n_hit for s in scenes) - alpha * sum(s.n_fp for s in scenes)) / n_gt


def epa_per_class(scenes: Sequence[SceneEpa], config: Config) -> Dict[str, Optional[float]]:
    """EPA of each evaluated class on its own, counts summed over scenes"""
    out: Dict[str, Optional[float]] = {}
    for c in config.MOTION_EVAL_CLASSES:
        n_gt, n_pred, n_match, n_hit = (sum(s.class_counts.get(c, [0, 0, 0, 0])[k] for s in scenes)
                                        for k in range(4))
        out[AGENT_CLASSES[c]] = (n_hit - config.ALPHA * (n_pred - n_match)) / n_gt if n_gt else None
    return out


# --- Average precision ---

def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of the two directed mean nearest-point distances"""
    d = cdist(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def average_precision(true_positive: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated area under the precision-recall curve; input ranked by score"""
    if n_gt <= 0:
        raise ValueError("average precision needs at least one ground-truth item")
    tp = np.asarray(true_positive, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    hits = np.cumsum(tp)
    precision = hits / np.arange(1, tp.size + 1)
    recall = hits / n_gt
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    interp = []
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r, side="left")
        interp.append(envelope[idx] if idx < envelope.size else 0.0)
    return float(np.mean(interp))


def _ranked(items: List[Tuple[float, int, int]]) -> List[Tuple[float, int, int]]:
    # descending score, then scene and prediction order
    return sorted(items, key=lambda t: (-t[0], t[1], t[2]))


def chamfer_map_ap(pred_sets: Sequence[Sequence[PredMapInstance]], gt_sets: Sequence[Sequence[MapInstanceGT]],
                   threshold: float, class_id: int) -> Optional[float]:
    """AP of one map class; a prediction is a hit when its nearest unclaimed same-class GT is within threshold"""
    n_gt = sum(1 for gts in gt_sets for g in gts if g.class_id == class_id)
    if n_gt == 0:
        return None
    ranked = []
    for s, preds in enumerate(pred_sets):
        for i, p in enumerate(preds):
            c, score = _predicted_class(p.scores)
            if c == class_id:
                ranked.append((score, s, i))

    claimed = set()
    flags = []
    for _, s, i in _ranked(ranked):
        best, best_d = None, math.inf
        for j, g in enumerate(gt_sets[s]):
            if g.class_id != class_id or (s, j) in claimed:
                continue
            d = chamfer_distance(pred_sets[s][i].points, g.points)
            if d < best_d:
                best, best_d = j, d
        hit = best is not None and best_d <= threshold
        if hit:
            claimed.add((s, best))
        flags.append(hit)
    return average_precision(flags, n_gt)


def _det_ap_at(pred_sets: Sequence[Sequence[PredAgent]], gt_sets: Sequence[Sequence[AgentGT]],
               threshold: float, class_id: int, n_gt: int) -> float:
    ranked = []
    for s, preds in enumerate(pred_sets):
        for i, p in enumerate(preds):
            c, score = _predicted_class(p.scores)
            if c == class_id:
                ranked.append((score, s, i))
    claimed = set()
    flags = []
    for _, s, i in _ranked(ranked):
        center = np.asarray(pred_sets[s][i].center)
        best, best_d = None, math.inf
        for j, g in enumerate(gt_sets[s]):
            if g.class_id != class_id or (s, j) in claimed:
                continue
            d = float(np.hypot(*(center - np.asarray(g.center))))
            if d < best_d:
                best, best_d = j, d
        hit = best is not None and best_d <= threshold
        if hit:
            claimed.add((s, best))
        flags.append(hit)
    return average_precision(flags, n_gt)


def det_ap(pred_sets: Sequence[Sequence[PredAgent]], gt_sets: Sequence[Sequence[AgentGT]],
           thresholds: Sequence[float]) -> ApSummary:
    """Per-class AP averaged over center-distance thresholds, then mean over classes with GT"""
    per_class: Dict[str, Optional[float]] = {}
    for c, name in enumerate(AGENT_CLASSES):
        n_gt = sum(1 for gts in gt_sets for g in gts if g.class_id == c)
        if n_gt == 0:
            per_class[name] = None
            continue
        per_class[name] = math.fsum(_det_ap_at(pred_sets, gt_sets, t, c, n_gt) for t in thresholds) / len(thresholds)
    return _summary(per_class)


def map_ap(pred_sets: Sequence[Sequence[PredMapInstance]], gt_sets: Sequence[Sequence[MapInstanceGT]],
           threshold: float) -> ApSummary:
    per_class = {name: chamfer_map_ap(pred_sets, gt_sets, threshold, c) for c, name in enumerate(MAP_CLASSES)}
    return _summary(per_class)


def _summary(per_class: Dict[str, Optional[float]]) -> ApSummary:
    present = [v for v in per_class.values() if v is not None]
    return ApSummary(per_class=per_class, mean=math.fsum(present) / len(present) if present else None)


# --- Report ---

def check_pairing(scenes: Sequence[Scene], predictions: Sequence[PredictionSet]) -> List[Violation]:
    """Every scene needs exactly one prediction set and vice versa"""
    scene_ids = {s.scene_id for s in scenes}
    pred_ids = {p.scene_id for p in predictions}
    out = [Violation(field="predictions.scene_id", rule=f"unknown scene_id {sid!r}")
           for sid in sorted(pred_ids - scene_ids)]
    out += [Violation(field="scenes.scene_id", rule=f"no predictions for scene_id {sid!r}")
            for sid in sorted(scene_ids - pred_ids)]
    return out


def _scene_evaluation(scene: Scene, preds: PredictionSet, config: Config) -> Tuple[SceneEpa, DisplacementSummary, List[Tuple[float, float]]]:
    counts = epa_scene(preds.agents, scene.agents, config)
    pairs = [(preds.agents[i], scene.agents[j]) for i, j in counts.pairs]
    disp = displacement_metrics(pairs, config)
    per_agent = [agent_displacement(p, g) for p, g in pairs if g.complete and len(g.future) == config.T_F]
    return counts, disp, per_agent


def evaluate(scenes: Sequence[Scene], predictions: Sequence[PredictionSet], config: Config,
             n_jobs: Optional[int] = None) -> MetricsReport:
    """Full metric suite over paired scene and prediction files"""
    violations = check_pairing(scenes, predictions)
    if violations:
        for v in violations:
            logger.error(f"Pairing violation: {v}")
        raise ValidationFailure(f"scene and prediction files disagree: {violations[0]}", violations)

    by_id = {p.scene_id: p for p in predictions}
    ordered = [by_id[s.scene_id] for s in scenes]
    results = Parallel(n_jobs=n_jobs or config.N_JOBS)(
        delayed(_scene_evaluation)(scene, preds, config) for scene, preds in zip(scenes, ordered))

    per_scene, agents = [], []
    for scene, preds, (counts, disp, per_agent) in zip(scenes, ordered, results):
        agents.extend(per_agent)
        per_scene.append(SceneMetrics(
            scene_id=scene.scene_id, n_gt=counts.n_gt, n_pred=counts.n_pred, n_match=counts.n_match,
            n_hit=counts.n_hit, n_fp=counts.n_fp, n_valid=disp.n_valid,
            epa=_epa_from_counts([counts], config.ALPHA), min_ade=disp.min_ade, min_fde=disp.min_fde,
        ))

    n_valid = len(agents)
    min_ade = math.fsum(a for a, _ in agents) / n_valid if n_valid else None
    min_fde = math.fsum(f for _, f in agents) / n_valid if n_valid else None
    miss_rate = sum(1 for _, f in agents if f > config.TAU_EPA) / n_valid if n_valid else None
    counts = [r[0] for r in results]

    report = MetricsReport(
        epa=_epa_from_counts(counts, config.ALPHA),
        epa_per_class=epa_per_class(counts, config),
        min_ade_mean=min_ade,
        min_fde_mean=min_fde,
        miss_rate=miss_rate,
        map_ap=map_ap([p.map for p in ordered], [s.map_instances for s in scenes], config.CHAMFER_THRESHOLD),
        det_ap=det_ap([p.agents for p in ordered], [s.agents for s in scenes], config.DET_THRESHOLDS),
        n_gt=sum(c.n_gt for c in counts),
        n_fp=sum(c.n_fp for c in counts),
        n_hit=sum(c.n_hit for c in counts),
        n_match=sum(c.n_match for c in counts),
        n_valid=n_valid,
        tau_epa=config.TAU_EPA,
        alpha=config.ALPHA,
        per_scene=per_scene,
    )
    logger.info(f"Evaluated {len(scenes)} scenes: EPA={report.epa}, minADE={report.min_ade_mean}, "
                f"minFDE={report.min_fde_mean}, MR={report.miss_rate}")
    return report
