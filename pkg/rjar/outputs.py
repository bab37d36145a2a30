"""
Output files: CSV tables through pandas, JSON documents, and the
`<file>.meta.json` sidecar written next to every output.

Nothing time-dependent is written, so identical configurations give
byte-identical files.
"""

import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from . import __version__
from .errors import ResourceError

logger = logging.getLogger(__name__)

SIDECAR_SUFFIX = ".meta.json"
PathLike = Union[str, Path]


def to_jsonable(value: Any) -> Any:
    """Convert models, enums, paths and numpy values to plain JSON types; NaN and inf become None."""
    if isinstance(value, BaseModel):
        return to_jsonable(value.model_dump(mode="python"))
    if isinstance(value, dict):
        return {str(to_jsonable(k)): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def dumps(document: Any) -> str:
    """Canonical JSON text: sorted keys, no NaN, trailing newline."""
    return json.dumps(to_jsonable(document), sort_keys=True, indent=2, allow_nan=False) + "\n"


def resolve_path(path: PathLike, output_dir: Optional[PathLike] = None) -> Path:
    """Relative paths are taken against output_dir."""
    path = Path(path)
    if output_dir is not None and not path.is_absolute():
        path = Path(output_dir) / path
    return path


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + SIDECAR_SUFFIX)


def _write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        logger.error(f"Cannot write {path}: {e}")
        raise ResourceError(f"cannot write output file {path}: {e}") from e
    logger.info(f"Wrote {path}")
    return path


def write_json(path: PathLike, document: Any) -> Path:
    return _write_text(Path(path), dumps(document))


def write_csv(path: PathLike, rows: List[Dict[str, Any]], columns: List[str]) -> Path:
    """
    Write rows as CSV with a fixed column order.

    Floats are written with full round-trip precision; missing values are
    left empty.
    """
    frame = pd.DataFrame(rows, columns=columns)
    text = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    return _write_text(Path(path), text)


def write_sidecar(path: PathLike, config: Any, extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write `<path>.meta.json` echoing the resolved configuration.

    Args:
        path: the output file the sidecar describes
        config: resolved configuration (usually a CliConfig)
        extra: additional metadata such as summaries or skip reasons
    """
    meta = {"output": Path(path).name, "version": __version__, "config": config}
    if extra:
        meta.update(extra)
    return write_json(sidecar_path(path), meta)


def write_with_sidecar(
    path: PathLike,
    document: Any,
    config: Any,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write a JSON document and its sidecar."""
    written = write_json(path, document)
    write_sidecar(written, config, extra)
    return written
