"""Two-stage detection head with distillation, a text-embedding classifier and semantic regression."""

from .infer import Detection, detect_dataset, infer
from .losses import (LossBreakdown, batched_distillation_loss, classification_loss, cosine_logits,
                     distillation_loss, regression_loss, total_loss)
from .model import Detector, DetectorConfig, HeadBranches, TextClassifier
from .train import (TrainConfig, TrainSample, build_samples, compute_losses, load_detector,
                    save_detector, train)
