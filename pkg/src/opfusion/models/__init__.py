"""Small example models bundled with the package."""

from __future__ import annotations

from pathlib import Path

from ..graph import ECG, load_model

MODELS_DIR = Path(__file__).resolve().parent


def bundled_models() -> list[str]:
    return sorted(p.stem for p in MODELS_DIR.glob("*.json"))


def bundled_path(name: str) -> Path:
    path = MODELS_DIR / f"{name}.json"
    if not path.exists():
        raise FileNotFoundError(f"no bundled model {name!r}; available: {', '.join(bundled_models())}")
    return path


def load_bundled(name: str) -> ECG:
    return load_model(bundled_path(name))
