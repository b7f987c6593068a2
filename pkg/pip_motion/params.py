"""
Named parameter store for the interactor, heads and query embeddings
"""
import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np

from .config import Config
from .errors import ConfigurationError, DimensionError
from .models import AGENT_CLASSES, MAP_CLASSES
from .storage import atomic_open
from .tensor import DerivativeRecord, DiffValue

logger = logging.getLogger(__name__)

BoundParams = Mapping[str, DiffValue]

# No key bias: it shifts every score of a row equally and softmax cancels it
ATTENTION_KEYS = ("wq", "bq", "wk", "wv", "bv", "wo", "bo")


def _mlp_shapes(prefix: str, sizes: List[int]) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for i in range(len(sizes) - 1):
        shapes[f"{prefix}.w{i}"] = (sizes[i], sizes[i + 1])
        shapes[f"{prefix}.b{i}"] = (sizes[i + 1],)
    return shapes


def _attention_shapes(prefix: str, c: int) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for key in ATTENTION_KEYS:
        shapes[f"{prefix}.{key}"] = (c, c) if key.startswith("w") else (c,)
    return shapes


def layer_sizes(config: Config) -> Dict[str, List[int]]:
    """Layer sizes of every MLP in the model, keyed by parameter prefix"""
    c = config.C
    sizes = {
        "embed.agent_pose": [4, c, c],
        "embed.map_point": [2, c, c],
        "self_ffn": [c, 2 * c, c],
        "cross_ffn": [c, 2 * c, c],
        "pe": [2, c, c],
        "motion_head": [2 * c, 2 * c, config.T_F * 2],
        "map_head.cls": [c, len(MAP_CLASSES)],
        "map_head.reg": [c, 2],
        "det_head.cls": [c, len(AGENT_CLASSES)],
        "det_head.reg": [c, 5],
    }
    for layer in range(3):
        sizes[f"subgraph.{layer}"] = [c, c // 2]
    return sizes


def declared_shapes(config: Config) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every parameter name and shape implied by the config"""
    c = config.C
    shapes: Dict[str, Tuple[int, ...]] = {
        "mode_queries": (config.N_MODE, c),
        "embed.agent_class": (len(AGENT_CLASSES), c),
        "embed.map_class": (len(MAP_CLASSES), c),
    }
    shapes.update(_attention_shapes("self_attn", c))
    shapes.update(_attention_shapes("cross_attn", c))
    if not config.PLAIN_BLOCKS:
        for ln in ("self_ln1", "self_ln2", "cross_ln1", "cross_ln2"):
            shapes[f"{ln}.gamma"] = (c,)
            shapes[f"{ln}.beta"] = (c,)
    for prefix, sizes in layer_sizes(config).items():
        shapes.update(_mlp_shapes(prefix, sizes))
    return OrderedDict(sorted(shapes.items()))


class ModelParams:
    """Ordered mapping name -> float64 array"""

    def __init__(self, arrays: Optional[Mapping[str, np.ndarray]] = None):
        self.arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, arr in (arrays or {}).items():
            self.arrays[name] = np.array(arr, dtype=np.float64, copy=True)

    @classmethod
    def init(cls, config: Config, seed: int = 0) -> "ModelParams":
        """
        Linear weights uniform in +-1/sqrt(fan_in), biases zero, layer-norm
        gains one, embedding tables uniform in +-1. Mode queries are rows of a
        scaled identity so they are exactly orthogonal.
        """
        rng = np.random.default_rng(seed)
        arrays: Dict[str, np.ndarray] = {}
        for name, shape in declared_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if name == "mode_queries":
                arrays[name] = np.eye(config.N_MODE, config.C)
            elif name.startswith("embed.") and name.endswith("_class"):
                arrays[name] = rng.uniform(-1.0, 1.0, size=shape)
            elif leaf == "gamma":
                arrays[name] = np.ones(shape)
            elif leaf.startswith("b") or leaf == "beta":
                arrays[name] = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                arrays[name] = rng.uniform(-bound, bound, size=shape)
        logger.info(f"Initialized {len(arrays)} parameter tensors ({cls._count(arrays)} values)")
        return cls(arrays)

    @staticmethod
    def _count(arrays: Mapping[str, np.ndarray]) -> int:
        return int(sum(a.size for a in arrays.values()))

    def __len__(self) -> int:
        return len(self.arrays)

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def size(self) -> int:
        return self._count(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arrays)

    def check(self, config: Config) -> None:
        """Raise if names or shapes disagree with the config"""
        declared = declared_shapes(config)
        missing = sorted(set(declared) - set(self.arrays))
        orphans = sorted(set(self.arrays) - set(declared))
        if missing or orphans:
            raise ConfigurationError(f"parameter names do not match config: missing={missing}, orphan={orphans}")
        for name, shape in declared.items():
            if self.arrays[name].shape != shape:
                raise DimensionError(f"parameter {name} has shape {self.arrays[name].shape}, expected {shape}")

    def bind(self, record: Optional[DerivativeRecord] = None) -> Dict[str, DiffValue]:
        """Values for a forward pass: record leaves when `record` is given, constants otherwise"""
        if record is None:
            return {name: DiffValue(arr) for name, arr in self.arrays.items()}
        return {name: record.leaf(arr) for name, arr in self.arrays.items()}

    # --- Serialization ---

    def to_document(self) -> Dict[str, Dict]:
        return {name: {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
                for name, arr in self.arrays.items()}

    @classmethod
    def from_document(cls, document: Mapping[str, Mapping]) -> "ModelParams":
        arrays = {}
        for name, entry in document.items():
            shape = tuple(int(s) for s in entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise DimensionError(f"parameter {name}: {values.size} values for shape {shape}")
            arrays[name] = values.reshape(shape)
        return cls(arrays)

    def save(self, path: Union[str, Path]) -> None:
        # json writes floats with their shortest round-trip repr, so f64 values reload bitwise
        with atomic_open(path) as f:
            json.dump(self.to_document(), f, allow_nan=False)
        logger.info(f"Saved {len(self.arrays)} parameter tensors to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelParams":
        with open(path, "r", encoding="utf-8") as f:
            params = cls.from_document(json.load(f))
        logger.info(f"Loaded {len(params)} parameter tensors from {path}")
        return params


def scope(params: BoundParams, prefix: str) -> Dict[str, DiffValue]:
    """Sub-mapping of the names under `prefix.` with the prefix stripped"""
    head = prefix + "."
    return {name[len(head):]: value for name, value in params.items() if name.startswith(head)}
