"""Physics-informed Laplace neural operator built on a small numpy autodiff engine."""

from .data import Dataset, GeneratorConfig, NormStats
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .train import RunConfig, train_pipeline

__version__ = "0.1.0"

__all__ = ["Dataset", "GeneratorConfig", "NormStats", "ModelConfig", "ModelParams", "forward", "init_params",
           "load_checkpoint", "save_checkpoint", "RunConfig", "train_pipeline", "__version__"]
