"""Bundled synthetic cases and scenario files."""

from importlib import resources
from pathlib import Path


def case_path(name: str) -> Path:
    """Filesystem path of a bundled case (without the .case suffix)."""
    return Path(str(resources.files(__name__) / "cases" / f"{name}.case"))


def scenario_path(name: str) -> Path:
    return Path(str(resources.files(__name__) / "scenarios" / f"{name}.scn"))
