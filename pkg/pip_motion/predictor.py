"""
Parameter loading and batch inference over scenes
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

from joblib import Parallel, delayed

from .config import Config
from .errors import ContractError
from .interactor import full_forward
from .models import GenConfig, PredictionSet, Scene
from .params import ModelParams
from .synthgen import synth_queries

logger = logging.getLogger(__name__)


def predict_scene(scene: Scene, params: ModelParams, config: Config, gen_config: GenConfig) -> PredictionSet:
    """Synthesized queries -> full forward pass, without a derivative record"""
    bound = params.bind()
    bundle = synth_queries(scene, bound, gen_config, config)
    return full_forward(bundle, None, bound, config, scene_id=scene.scene_id)


class MotionPredictor:
    """Holds a parameter set and runs inference scene by scene"""

    def __init__(self, config: Config, gen_config: Optional[GenConfig] = None):
        self.config = config
        self.gen_config = gen_config or GenConfig()
        self.params: Optional[ModelParams] = None

    @property
    def loaded(self) -> bool:
        return self.params is not None

    def load_params(self, path: Union[str, Path]) -> ModelParams:
        """Load and check a parameter file against the config"""
        try:
            params = ModelParams.load(path)
            params.check(self.config)
        except Exception as e:
            logger.error(f"Failed to load parameters from {path}: {e}")
            raise
        self.params = params
        return params

    def use_params(self, params: ModelParams) -> None:
        params.check(self.config)
        self.params = params

    def predict(self, scenes: Sequence[Scene], n_jobs: Optional[int] = None) -> List[PredictionSet]:
        """Predictions in input order; scenes fan out over `n_jobs` workers"""
        if self.params is None:
            raise ContractError("no parameters loaded")
        results = Parallel(n_jobs=n_jobs or self.config.N_JOBS)(
            delayed(predict_scene)(scene, self.params, self.config, self.gen_config) for scene in scenes)
        logger.info(f"Predicted {len(results)} scenes")
        return list(results)
