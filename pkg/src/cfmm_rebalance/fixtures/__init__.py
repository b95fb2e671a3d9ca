"""Scenario files for the worked examples."""

from pathlib import Path

FIXTURES = Path(__file__).parent


def path(name: str) -> Path:
    return FIXTURES / f"{name}.json"
