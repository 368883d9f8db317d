from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, dump_config, load_config
from .evaluate import EvalSettings, evaluate, evaluate_models, model_predictor, oracle_predictor
from .model import ProtoSegModel, build_model
from .train import TrainingAborted, train, training_step

__all__ = [
    "CheckpointError", "Config", "ConfigError", "EvalSettings", "ProtoSegModel", "TrainingAborted",
    "build_model", "dump_config", "evaluate", "evaluate_models", "load_checkpoint", "load_config",
    "model_predictor", "oracle_predictor", "save_checkpoint", "train", "training_step",
]
