"""Active feature acquisition with a masked sequence model trained on synthetic task priors."""

from .acquisition import TaskView, acquire
from .seqmodel import ModelConfig, SequenceModel
from .trainer import TrainConfig, load_checkpoint, pretrain_policy, pretrain_predictor, save_checkpoint

__version__ = "0.1.0"
