"""
Toy-scale training loop: synthesized queries -> forward -> detached matching
-> weighted loss -> backward -> AdamW.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import Config, TrainConfig
from .errors import ContractError, DimensionError, NumericalError
from .interactor import forward
from .matching import LOSS_NAMES, scene_losses, total_loss
from .models import GenConfig, Scene
from .params import ModelParams
from .synthgen import synth_queries
from .tensor import DerivativeRecord, backward

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["step", *LOSS_NAMES, "total"]

LogSink = Callable[[Dict[str, float]], None]


@dataclass
class OptimState:
    """AdamW moments and hyperparameters"""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    lr: float = 2e-4
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    total_steps: Optional[int] = None
    cosine_schedule: bool = False

    @classmethod
    def create(cls, params: ModelParams, train_config: Optional[TrainConfig] = None) -> "OptimState":
        tc = train_config or TrainConfig()
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.arrays.items()},
            v={name: np.zeros_like(arr) for name, arr in params.arrays.items()},
            lr=tc.lr, weight_decay=tc.weight_decay, betas=tuple(tc.betas), eps=tc.eps,
            total_steps=tc.steps, cosine_schedule=tc.cosine_schedule,
        )

    def current_lr(self) -> float:
        """Learning rate for the next update"""
        if not self.cosine_schedule or not self.total_steps:
            return self.lr
        progress = min(self.step, self.total_steps) / self.total_steps
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: ModelParams, grads: Mapping[str, np.ndarray],
               state: OptimState) -> Tuple[ModelParams, OptimState]:
    """Adam update with decoupled weight decay; returns new params and state"""
    for name, arr in params.arrays.items():
        if name not in grads or name not in state.m:
            raise ContractError(f"no gradient or moment for parameter {name}")
        g = np.asarray(grads[name])
        if g.shape != arr.shape or state.m[name].shape != arr.shape:
            raise DimensionError(f"parameter {name} has shape {arr.shape}, gradient {g.shape}, "
                                 f"moment {state.m[name].shape}")
        if not np.all(np.isfinite(g)):
            logger.error(f"Non-finite gradient for {name} at step {state.step + 1}")
            raise NumericalError(f"non-finite gradient for parameter {name} at step {state.step + 1}")

    lr = state.current_lr()
    t = state.step + 1
    b1, b2 = state.betas
    new_arrays, new_m, new_v = {}, {}, {}
    for name, theta in params.arrays.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        decayed = theta * (1.0 - lr * state.weight_decay)
        new_arrays[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v

    new_state = OptimState(m=new_m, v=new_v, step=t, lr=state.lr, weight_decay=state.weight_decay,
                           betas=state.betas, eps=state.eps, total_steps=state.total_steps,
                           cosine_schedule=state.cosine_schedule)
    return ModelParams(new_arrays), new_state


def loss_and_grads(params: ModelParams, scene: Scene, config: Config,
                   gen_config: GenConfig) -> Tuple[Dict[str, float], Dict[str, np.ndarray]]:
    """Loss components, weighted total and gradients for one scene"""
    record = DerivativeRecord()
    bound = params.bind(record)
    outputs = forward(synth_queries(scene, bound, gen_config, config), bound, config)
    components, _ = scene_losses(outputs, scene, config)
    total = total_loss(components, config.LOSS_WEIGHTS)

    row = components.as_floats()
    row["total"] = float(total.data)
    if total.tracked:
        grads = backward(total, record)
        grad_arrays = {name: grads.of(bound[name]) for name in params}
    else:
        grad_arrays = {name: np.zeros_like(arr) for name, arr in params.arrays.items()}
    return row, grad_arrays


@dataclass
class TrainResult:
    params: ModelParams
    history: List[Dict[str, float]] = field(default_factory=list)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=HISTORY_COLUMNS)


def train_toy(scenes: Sequence[Scene], params: ModelParams, config: Config,
              train_config: Optional[TrainConfig] = None, gen_config: Optional[GenConfig] = None,
              log_sink: Optional[LogSink] = None) -> TrainResult:
    """One scene per step, cycling through `scenes` in order"""
    if not scenes:
        raise ContractError("training needs at least one scene")
    tc = train_config or TrainConfig()
    gen_config = gen_config or GenConfig(seed=tc.seed)
    params.check(config)

    state = OptimState.create(params, tc)
    history: List[Dict[str, float]] = []
    logger.info(f"Training for {tc.steps} steps on {len(scenes)} scene(s), {params.size()} parameters")
    for step in range(tc.steps):
        scene = scenes[step % len(scenes)]
        row, grads = loss_and_grads(params, scene, config, gen_config)
        row = {"step": step + 1, **row}
        history.append(row)
        if log_sink is not None:
            log_sink(row)

        if not math.isfinite(row["total"]) or row["total"] > tc.divergence_limit:
            logger.error(f"Training diverged at step {step + 1}: total loss {row['total']}")
            raise NumericalError(f"total loss {row['total']} at step {step + 1} exceeds "
                                 f"{tc.divergence_limit}", history=history)
        try:
            params, state = adamw_step(params, grads, state)
        except NumericalError as e:
            raise NumericalError(str(e), history=history) from e

        if (step + 1) % tc.log_every == 0 or step == 0:
            parts = ", ".join(f"{k}={row[k]:.4f}" for k in LOSS_NAMES)
            logger.info(f"Step {step + 1}/{tc.steps}: {parts}, total={row['total']:.4f}")
    return TrainResult(params, history)
