"""
Finite-difference verification of every differentiable block on the tiny
configuration.
"""
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from .config import Config, tiny_config
from .errors import NumericalError
from .interactor import (
    decode_motion,
    decode_perception,
    encode_map_instances,
    forward,
    map_position_encoding,
    motion_map_block,
    motion_self_block,
)
from .matching import compute_matchings, focal_loss, scene_losses, total_loss
from .models import GenConfig, Scene
from .params import ModelParams
from .synthgen import generate_scene, synth_queries
from .tensor import DiffValue, abs_, finite_diff_errors, kink_margin, multi_head_attention, sum_all

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
# Absolute floor for exactly-zero gradients; central-difference round-off on the
# tiny total loss is about 5e-9
GRADCHECK_ATOL = 1e-7
KINK_MARGIN = 1e-3
KINK_ATTEMPTS = 200


@dataclass
class BlockResult:
    name: str
    max_error: float
    per_param: Dict[str, float]
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= GRADCHECK_TOLERANCE


def _with_prefixes(params: ModelParams, *prefixes: str) -> Dict[str, np.ndarray]:
    return {name: arr for name, arr in params.arrays.items() if name.startswith(prefixes)}


def tiny_scene(config: Config, seed: int = 0) -> Scene:
    """Straight road, two lanes, one crossing and three dynamic agents"""
    gen = GenConfig(seed=seed, lanes_per_scene=2, crossings_per_scene=1, geometry="straight",
                    agents_per_scene=3, static_fraction=0.0, exit_fraction=0.0, pedestrian_fraction=0.0)
    return generate_scene(gen, 0, config)


def _blocks(config: Config, params: ModelParams, rng: np.random.Generator):
    """(name, scalar function, arguments) for each block"""
    c = config.C
    n_a, n_i, n_p, n_mode = 3, 4, config.N_P, config.N_MODE

    def attention_args():
        args = _with_prefixes(params, "self_attn.")
        args = {name.split(".", 1)[1]: arr for name, arr in args.items()}
        args.update(q=rng.standard_normal((n_a, c)), k=rng.standard_normal((n_i, c)),
                    v=rng.standard_normal((n_i, c)), k_pos=rng.standard_normal((n_i, c)))
        return args

    attn_weights = rng.standard_normal((n_a, c))

    def attention(p):
        return sum_all(multi_head_attention(p["q"], p["k"], p["v"], p["k_pos"], p, config.HEADS) * attn_weights)

    self_weights = rng.standard_normal((n_a, n_mode, c))
    self_args = {**_with_prefixes(params, "self_"), "q_motion": rng.standard_normal((n_a, n_mode, c))}

    def self_block(p):
        return sum_all(motion_self_block(p["q_motion"], p, config) * self_weights)

    enc_weights = rng.standard_normal((2, c))
    enc_args = {**_with_prefixes(params, "subgraph."), "selected": rng.standard_normal((2, n_p, c))}

    def map_encoder(p):
        return sum_all(encode_map_instances(p["selected"], p, config) * enc_weights)

    points = rng.uniform(-10.0, 10.0, size=(2, n_p, 2))
    pe_weights = rng.standard_normal((2, c))

    def position_encoding(p):
        return sum_all(map_position_encoding(points, p, config)[1] * pe_weights)

    cross_weights = rng.standard_normal((n_mode, c))
    cross_args = {**_with_prefixes(params, "cross_"), "q_sa": rng.standard_normal((n_mode, c)),
                  "instances": rng.standard_normal((n_i, c)), "pe": rng.standard_normal((n_i, c))}

    def cross_block(p):
        return sum_all(motion_map_block(p["q_sa"], p["instances"], p["pe"], p, config) * cross_weights)

    motion_target = rng.standard_normal((n_a, n_mode, config.T_F, 2))
    motion_args = {**_with_prefixes(params, "motion_head."), "fused": rng.standard_normal((n_a, n_mode, 2 * c))}

    def motion_decoder(p):
        return sum_all(abs_(decode_motion(p["fused"], p, config) - motion_target))

    map_targets = (rng.random((n_i, config.n_map_classes)) < 0.3).astype(float)
    agent_targets = (rng.random((n_a, config.n_agent_classes)) < 0.3).astype(float)
    point_target = rng.uniform(-20.0, 20.0, size=(n_i, n_p, 2))
    box_target = rng.uniform(0.5, 5.0, size=(n_a, 5))
    head_args = {**_with_prefixes(params, "map_head.", "det_head."),
                 "agent_queries": rng.standard_normal((n_a, c)), "map_queries": rng.standard_normal((n_i, n_p, c))}

    def perception_heads(p):
        out = decode_perception(p["agent_queries"], p["map_queries"], p, config)
        return (focal_loss(out.map_scores, map_targets, config.FOCAL_ALPHA, config.FOCAL_GAMMA)
                + focal_loss(out.agent_scores, agent_targets, config.FOCAL_ALPHA, config.FOCAL_GAMMA)
                + sum_all(abs_(out.map_points - point_target))
                + sum_all(abs_(out.agent_boxes - box_target)))

    return [
        ("attention", attention, attention_args()),
        ("self_block", self_block, self_args),
        ("map_encoder", map_encoder, enc_args),
        ("position_encoding", position_encoding, _with_prefixes(params, "pe.")),
        ("cross_block", cross_block, cross_args),
        ("motion_decoder", motion_decoder, motion_args),
        ("perception_heads", perception_heads, head_args),
    ]


def total_loss_function(scene: Scene, params: ModelParams, config: Config,
                        gen_config: GenConfig) -> Callable[[Dict[str, DiffValue]], DiffValue]:
    """Scalar total loss of the whole pipeline with matchings frozen at `params`"""
    bound = params.bind()
    matchings = compute_matchings(forward(synth_queries(scene, bound, gen_config, config), bound, config),
                                  scene, config)

    def f(p):
        outputs = forward(synth_queries(scene, p, gen_config, config), p, config)
        components, _ = scene_losses(outputs, scene, config, matchings)
        return total_loss(components, config.LOSS_WEIGHTS)

    return f


def _evaluation_point(params: ModelParams, rng: np.random.Generator) -> ModelParams:
    """Copy of `params` with every bias and shift moved 0.05 to 0.15 away from zero"""
    arrays = {}
    for name, arr in params.arrays.items():
        if name.rsplit(".", 1)[-1].startswith("b"):
            arr = arr + rng.choice([-1.0, 1.0], size=arr.shape) * rng.uniform(0.05, 0.15, size=arr.shape)
        arrays[name] = arr
    return ModelParams(arrays)


def _smooth_suite(config: Config, params: ModelParams, scene: Scene, gen_config: GenConfig,
                  rng: np.random.Generator):
    """
    Resample the evaluation point and block inputs until every function sits
    at least KINK_MARGIN away from a relu, abs or max-pool kink, so that a
    central difference never straddles one.
    """
    for attempt in range(1, KINK_ATTEMPTS + 1):
        point = _evaluation_point(params, rng)
        suite = _blocks(config, point, rng)
        suite.append(("total_loss", total_loss_function(scene, point, config, gen_config), dict(point.arrays)))
        margins = {name: kink_margin(f, args) for name, f, args in suite}
        closest = min(margins, key=margins.get)
        if margins[closest] >= KINK_MARGIN:
            logger.info(f"gradcheck evaluation point found after {attempt} attempt(s), "
                        f"closest kink {margins[closest]:.2e} in {closest}")
            return suite
        logger.debug(f"attempt {attempt}: {closest} is {margins[closest]:.2e} from a kink, resampling")
    raise NumericalError(f"no evaluation point at least {KINK_MARGIN} from every kink "
                         f"after {KINK_ATTEMPTS} attempts")


def run_gradcheck(config: Optional[Config] = None, eps: float = 1e-5, seed: int = 0,
                  max_coords: Optional[int] = None) -> List[BlockResult]:
    """
    Max relative error per block, then for the total loss w.r.t. every
    parameter. Every coordinate is checked unless `max_coords` caps the
    number sampled per tensor.
    """
    config = config or tiny_config()
    params = ModelParams.init(config, seed)
    rng = np.random.default_rng(seed)
    scene = tiny_scene(config, seed)
    suite = _smooth_suite(config, params, scene, GenConfig(seed=seed), rng)

    results = []
    for name, f, args in suite:
        start = time.perf_counter()
        per_param = finite_diff_errors(f, args, eps=eps, max_coords=max_coords, seed=seed, atol=GRADCHECK_ATOL)
        result = BlockResult(name, max(per_param.values(), default=0.0), per_param, time.perf_counter() - start)
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"gradcheck {name}: max relative error {result.max_error:.3e} "
                          f"over {len(per_param)} tensors ({result.seconds:.2f}s)")
        results.append(result)
    return results
