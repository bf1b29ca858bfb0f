"""ACRNet CSI feedback toolkit: model, data pipeline, codec, complexity
accounting, training and deployment planning."""

from .codec import FeedbackPayload, dequantize, feedback_bits, pack, quantize, unpack
from .complexity import ComplexityReport, count, count_config
from .csi import Dataset, Normalization, dataset_load, dataset_save, generate_synthetic, nmse
from .errors import AcrnetError
from .model import AcrNet, ModelConfig, build, decode, encode, reconstruct
from .planner import DeploymentPlan, ResourceBudget, plan
from .trainer import TrainConfig, Trainer, checkpoint_load, checkpoint_save, evaluate, lr_at, train

__version__ = "0.1.0"
