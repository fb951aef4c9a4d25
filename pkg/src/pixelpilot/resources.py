from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=None)
def read_text(name: str) -> str:
    """Contents of a bundled resource under ``pixelpilot/prompts``."""
    return resources.files("pixelpilot").joinpath("prompts").joinpath(name).read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def read_json(name: str) -> dict:
    return json.loads(read_text(name))
