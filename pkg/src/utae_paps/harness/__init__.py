"""Training, evaluation and reporting around the models (also behind the CLI)."""
from .config import RunConfig, load_config
from .training import ablate, evaluate, predict, train

__all__ = ["RunConfig", "load_config", "train", "evaluate", "predict", "ablate"]
