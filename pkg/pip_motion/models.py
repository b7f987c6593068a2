"""
Pydantic models for scenes, predictions, reports and validation
"""
import math
from typing import TYPE_CHECKING, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field

if TYPE_CHECKING:
    from .config import Config

# Synthetic class taxonomy (mirrors the nuScenes split at desk scale)
AGENT_CLASSES: Tuple[str, ...] = ("car", "pedestrian", "traffic_cone", "barrier")
MAP_CLASSES: Tuple[str, ...] = ("divider", "crossing", "boundary")
STATIC_AGENT_CLASSES: Tuple[int, ...] = (2, 3)
DYNAMIC_AGENT_CLASSES: Tuple[int, ...] = (0, 1)

Point = Tuple[float, float]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# --- Ground truth ---

class MapInstanceGT(_Frozen):
    """One vectorized map element"""

    class_id: int = Field(..., description="Map class index (divider/crossing/boundary)")
    points: List[Point] = Field(..., description="Ordered polyline, ego frame (m)")


class AgentGT(_Frozen):
    """One ground-truth road participant"""

    class_id: int = Field(..., description="Agent class index")
    center: Point = Field(..., description="Box center, ego frame (m)")
    size: Point = Field(..., description="(length, width) in meters")
    yaw: float = Field(..., description="Heading (rad)")
    future: List[Point] = Field(..., description="Absolute future positions at 2 Hz")
    complete: bool = Field(..., description="Whether the future covers the whole horizon")


class Scene(_Frozen):
    """Ground-truth world at the current timestamp"""

    scene_id: str
    map_instances: List[MapInstanceGT] = Field(default_factory=list)
    agents: List[AgentGT] = Field(default_factory=list)
    dynamic_classes: List[int] = Field(default_factory=lambda: list(DYNAMIC_AGENT_CLASSES))

    model_config = ConfigDict(
        frozen=True,
        extra="forbid",
        json_schema_extra={
            "example": {
                "scene_id": "s0-000000",
                "map_instances": [{"class_id": 0, "points": [[0.0, -3.5], [10.0, -3.5]]}],
                "agents": [{
                    "class_id": 0, "center": [1.0, -1.75], "size": [4.5, 1.9], "yaw": 0.0,
                    "future": [[3.5, -1.75], [6.0, -1.75]], "complete": True,
                }],
                "dynamic_classes": [0, 1],
            }
        },
    )


# --- Predictions ---

class PredMapInstance(_Frozen):
    """Decoded map element"""

    scores: List[float] = Field(..., description="Per-class probabilities")
    points: List[Point] = Field(..., description="Ordered polyline, ego frame (m)")


class PredAgent(_Frozen):
    """Detected agent with its multi-mode forecast"""

    scores: List[float] = Field(..., description="Per-class probabilities")
    center: Point
    size: Point
    yaw: float
    forecast: List[List[Point]] = Field(..., description="N_mode x T_f per-step offsets (m)")


class PredictionSet(_Frozen):
    """Model outputs for one scene"""

    scene_id: str
    map: List[PredMapInstance] = Field(default_factory=list)
    agents: List[PredAgent] = Field(default_factory=list)


# --- Generation ---

class GenConfig(_Frozen):
    """Synthetic scene generator settings"""

    seed: int = 0
    lanes_per_scene: int = Field(2, ge=0)
    crossings_per_scene: int = Field(1, ge=0)
    geometry: Literal["straight", "arc", "S-curve", "mixed"] = "mixed"
    lane_width: float = Field(3.5, gt=0)
    agents_per_scene: int = Field(4, ge=0)
    speed_range: Tuple[float, float] = (2.0, 10.0)
    pedestrian_fraction: float = Field(0.2, ge=0.0, le=1.0)
    static_fraction: float = Field(0.2, ge=0.0, le=1.0)
    exit_fraction: float = Field(0.1, ge=0.0, le=1.0)
    min_agent_gap: float = Field(6.0, ge=0.0)

    # Noise scales, multiplied by the requested noise level
    map_point_noise: float = Field(1.0, ge=0.0, description="Map point std per noise unit (m)")
    center_noise: float = Field(1.0, ge=0.0, description="Agent center std per noise unit (m)")
    trajectory_noise: float = Field(1.0, ge=0.0, description="Trajectory std per noise unit (m)")
    score_corruption_prob: float = Field(0.0, ge=0.0, le=1.0)

    # Prediction oracle injections
    false_positives: int = Field(0, ge=0)
    drop_prob: float = Field(0.0, ge=0.0, le=1.0)
    fp_min_distance: float = Field(5.0, ge=0.0)
    score_epsilon: float = Field(1e-3, gt=0.0, lt=0.5)

    # Query synthesis
    query_noise_level: float = Field(0.0, ge=0.0)
    query_feature_noise: float = Field(0.0, ge=0.0)


# --- Reports ---

class Violation(_Frozen):
    """One broken invariant"""

    field: str
    index: Optional[int] = None
    rule: str

    def __str__(self) -> str:
        where = self.field if self.index is None else f"{self.field}[{self.index}]"
        return f"{where}: {self.rule}"


class ApSummary(_Frozen):
    """Average precision per class and its mean over classes with ground truth"""

    per_class: Dict[str, Optional[float]] = Field(default_factory=dict)
    mean: Optional[float] = None


class SceneMetrics(_Frozen):
    """Per-scene breakdown"""

    scene_id: str
    n_gt: int
    n_pred: int
    n_match: int
    n_hit: int
    n_fp: int
    n_valid: int
    epa: Optional[float] = None
    min_ade: Optional[float] = None
    min_fde: Optional[float] = None


class MetricsReport(_Frozen):
    """End-to-end evaluation summary"""

    epa: Optional[float] = None
    epa_per_class: Dict[str, Optional[float]] = Field(default_factory=dict)
    min_ade_mean: Optional[float] = None
    min_fde_mean: Optional[float] = None
    miss_rate: Optional[float] = None
    map_ap: ApSummary = Field(default_factory=ApSummary)
    det_ap: ApSummary = Field(default_factory=ApSummary)
    n_gt: int = 0
    n_fp: int = 0
    n_hit: int = 0
    n_match: int = 0
    n_valid: int = 0
    tau_epa: float = 2.0
    alpha: float = 0.5
    aggregation: str = "micro: counts summed over scenes before dividing"
    per_scene: List[SceneMetrics] = Field(default_factory=list)


class RunManifest(_Frozen):
    """Provenance record written next to every command's outputs"""

    command: str
    config: Dict = Field(default_factory=dict)
    seed: Optional[int] = None
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    build: str
    duration_seconds: float


# --- Validation ---

def _finite(values: Iterable[float]) -> bool:
    return all(math.isfinite(v) for v in values)


def _check_points(points: Sequence[Point], field: str, index: int, n_points: int,
                  half_range: Optional[float], out: List[Violation]) -> None:
    if len(points) != n_points:
        out.append(Violation(field=field, index=index,
                             rule=f"expected {n_points} points, got {len(points)}"))
    flat = [c for p in points for c in p]
    if not _finite(flat):
        out.append(Violation(field=field, index=index, rule="non-finite coordinate"))
    elif half_range is not None and any(abs(c) > half_range for c in flat):
        out.append(Violation(field=field, index=index,
                             rule=f"coordinate outside [-{half_range}, {half_range}]"))


def _check_scores(scores: Sequence[float], n_classes: int, field: str, index: int,
                  out: List[Violation]) -> None:
    if len(scores) != n_classes:
        out.append(Violation(field=field, index=index,
                             rule=f"expected {n_classes} class scores, got {len(scores)}"))
    if not _finite(scores) or any(s < 0.0 or s > 1.0 for s in scores):
        out.append(Violation(field=field, index=index, rule="scores must lie within [0, 1]"))


def _validate_scene(scene: Scene, config: "Config") -> List[Violation]:
    out: List[Violation] = []
    for i, inst in enumerate(scene.map_instances):
        if not 0 <= inst.class_id < len(MAP_CLASSES):
            out.append(Violation(field="map_instances.class_id", index=i,
                                 rule=f"unknown map class {inst.class_id}"))
        _check_points(inst.points, "map_instances.points", i, config.N_P, config.HALF_RANGE, out)

    for i, agent in enumerate(scene.agents):
        if not 0 <= agent.class_id < len(AGENT_CLASSES):
            out.append(Violation(field="agents.class_id", index=i,
                                 rule=f"unknown agent class {agent.class_id}"))
        if not (agent.size[0] > 0 and agent.size[1] > 0):
            out.append(Violation(field="agents.size", index=i, rule="size components must be > 0"))
        if not _finite([*agent.center, *agent.size, agent.yaw]):
            out.append(Violation(field="agents", index=i, rule="non-finite box value"))
        if agent.complete and len(agent.future) != config.T_F:
            out.append(Violation(field="agents.future", index=i,
                                 rule=f"complete trajectory needs {config.T_F} steps, got {len(agent.future)}"))
        elif len(agent.future) > config.T_F:
            out.append(Violation(field="agents.future", index=i,
                                 rule=f"trajectory longer than {config.T_F} steps"))
        if not _finite([c for p in agent.future for c in p]):
            out.append(Violation(field="agents.future", index=i, rule="non-finite coordinate"))

    for c in scene.dynamic_classes:
        if c in STATIC_AGENT_CLASSES:
            out.append(Violation(field="dynamic_classes", index=None,
                                 rule=f"static class {AGENT_CLASSES[c]} cannot be dynamic"))
        elif not 0 <= c < len(AGENT_CLASSES):
            out.append(Violation(field="dynamic_classes", index=None, rule=f"unknown agent class {c}"))
    return out


def _validate_predictions(preds: PredictionSet, config: "Config") -> List[Violation]:
    out: List[Violation] = []
    for i, inst in enumerate(preds.map):
        _check_scores(inst.scores, len(MAP_CLASSES), "map.scores", i, out)
        _check_points(inst.points, "map.points", i, config.N_P, None, out)

    for i, agent in enumerate(preds.agents):
        _check_scores(agent.scores, len(AGENT_CLASSES), "agents.scores", i, out)
        if not _finite([*agent.center, *agent.size, agent.yaw]):
            out.append(Violation(field="agents", index=i, rule="non-finite box value"))
        if len(agent.forecast) != config.N_MODE:
            out.append(Violation(field="agents.forecast", index=i,
                                 rule=f"expected {config.N_MODE} modes, got {len(agent.forecast)}"))
        for mode in agent.forecast:
            if len(mode) != config.T_F:
                out.append(Violation(field="agents.forecast", index=i,
                                     rule=f"each mode needs {config.T_F} offsets, got {len(mode)}"))
                break
        if not _finite([c for mode in agent.forecast for p in mode for c in p]):
            out.append(Violation(field="agents.forecast", index=i, rule="non-finite offset"))
    return out


def validate(item: Union[Scene, PredictionSet], config: "Config") -> List[Violation]:
    """Return every broken invariant of a scene or prediction set; empty when valid."""
    if isinstance(item, Scene):
        return _validate_scene(item, config)
    return _validate_predictions(item, config)


def validate_many(items: Sequence[Union[Scene, PredictionSet]], config: "Config") -> List[Violation]:
    """Validate a whole file: member invariants plus scene_id uniqueness"""
    out: List[Violation] = []
    seen: Dict[str, int] = {}
    for i, item in enumerate(items):
        if item.scene_id in seen:
            out.append(Violation(field="scene_id", index=i,
                                 rule=f"duplicate scene_id {item.scene_id!r} (first at {seen[item.scene_id]})"))
        else:
            seen[item.scene_id] = i
        for v in validate(item, config):
            out.append(Violation(field=f"{item.scene_id}.{v.field}", index=v.index, rule=v.rule))
    return out
