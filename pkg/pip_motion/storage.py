"""
File contracts: JSON Lines streams, JSON documents, CSV tables and manifests.
All writes go through a temporary file in the destination directory and an
atomic rename.
"""
import json
import logging
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator, List, Type, TypeVar, Union

import pandas as pd
from pydantic import BaseModel, ValidationError

from .errors import ValidationFailure
from .models import PredictionSet, RunManifest, Scene

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
M = TypeVar("M", bound=BaseModel)


@contextmanager
def atomic_open(path: PathLike, mode: str = "w") -> Iterator:
    """Open a temp file next to `path`; rename over it only if the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, encoding="utf-8", newline="") as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_jsonl(path: PathLike, items: Iterable[BaseModel]) -> int:
    count = 0
    with atomic_open(path) as f:
        for item in items:
            f.write(item.model_dump_json())
            f.write("\n")
            count += 1
    logger.info(f"Wrote {count} records to {path}")
    return count


def read_jsonl(path: PathLike, model: Type[M]) -> List[M]:
    items: List[M] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                items.append(model.model_validate_json(line))
            except ValidationError as e:
                logger.error(f"Malformed record at {path}:{line_no}: {e}")
                raise ValidationFailure(f"{path}:{line_no}: malformed {model.__name__} record") from e
    logger.info(f"Loaded {len(items)} {model.__name__} records from {path}")
    return items


def read_scenes(path: PathLike) -> List[Scene]:
    return read_jsonl(path, Scene)


def read_predictions(path: PathLike) -> List[PredictionSet]:
    return read_jsonl(path, PredictionSet)


def write_json(path: PathLike, document) -> None:
    with atomic_open(path) as f:
        json.dump(document, f, indent=2, allow_nan=False)
        f.write("\n")


def read_json(path: PathLike):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(path: PathLike, frame: pd.DataFrame, append: bool = False) -> None:
    """Write a table; with `append`, previous rows of an existing file are kept."""
    path = Path(path)
    if append and path.exists():
        frame = pd.concat([pd.read_csv(path), frame], ignore_index=True)
    with atomic_open(path) as f:
        frame.to_csv(f, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")


def manifest_path(output: PathLike) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


def write_manifest(output: PathLike, manifest: RunManifest) -> Path:
    path = manifest_path(output)
    write_json(path, manifest.model_dump(mode="json"))
    return path
