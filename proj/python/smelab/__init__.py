"""Python front end for the smelab pipeline.

Configs are plain dicts; missing keys take the defaults of the C++ RunConfig.
"""

import json
from os import PathLike
from typing import Dict, List, Union

from . import _smelab
from ._smelab import ConfigMismatch, VersionMismatch, smooth_max

__version__ = _smelab.__version__

Path = Union[str, PathLike]


def default_config() -> dict:
    return json.loads(_smelab.default_config())


def config(**overrides) -> dict:
    """Defaults merged with `overrides`; raises ValueError on bad values."""
    return json.loads(_smelab.normalize_config(json.dumps(overrides)))


def config_hashes(cfg: dict) -> Dict[str, str]:
    return _smelab.config_hashes(json.dumps(cfg))


def gen(cfg: dict, out: Path) -> dict:
    return json.loads(_smelab.gen(json.dumps(cfg), str(out)))


def train(cfg: dict, data: Path, out: Path) -> dict:
    return json.loads(_smelab.train(json.dumps(cfg), str(data), str(out)))


def edit(cfg: dict, model: Path, out: Path) -> dict:
    return json.loads(_smelab.edit(json.dumps(cfg), str(model), str(out)))


def report(edit_dirs: List[Path], out: Path) -> str:
    return _smelab.report([str(d) for d in edit_dirs], str(out))


def replay(edit_dir: Path, fold: int = 0) -> dict:
    return _smelab.replay(str(edit_dir), fold)


def generate(task: str, n: int, seed: int = 1, test_fraction: float = 0.0) -> List[dict]:
    """Synthetic examples as dicts: id, tokens, target, equivalents, split."""
    text = _smelab.generate(task, n, seed, test_fraction)
    return [json.loads(line) for line in text.splitlines() if line]


__all__ = [
    "ConfigMismatch",
    "VersionMismatch",
    "config",
    "config_hashes",
    "default_config",
    "edit",
    "gen",
    "generate",
    "replay",
    "report",
    "smooth_max",
    "train",
]
