import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stackelgrad.config import DataSpec, ExperimentSpec, GameConfig, VictimRecipe  # noqa: E402

ACCEPTANCE_CONFIG = Path(__file__).parent / "acceptance_config.json"


def load_acceptance():
    return json.loads(ACCEPTANCE_CONFIG.read_text())


def acceptance_spec(**overrides) -> ExperimentSpec:
    cfg = load_acceptance()
    fields = dict(game=GameConfig(**cfg["game"]), data=DataSpec(**cfg["data"]),
                  victim=VictimRecipe(**cfg["victim"]), seeds=tuple(cfg["seeds"]),
                  clean_floor=cfg["clean_floor"])
    fields.update(overrides)
    return ExperimentSpec(**fields)


class _Lazy:
    """Computes each expensive experiment once per session."""

    def __init__(self):
        self._cache = {}

    def get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]


@pytest.fixture(scope="session")
def experiments():
    return _Lazy()


def toy_spec_dict(**game) -> dict:
    g = {"budget": 0.5, "epochs": 2, "batch_size": 64, "lr_w": 1.0}
    g.update(game)
    return {"game": g,
            "data": {"n_samples": 300, "n_features": 6, "seed": 3},
            "victim": {"epochs": 5},
            "seeds": [0, 1],
            "fractions": [0.5, 1.0],
            "clean_floor": 0.5}
