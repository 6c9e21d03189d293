"""Evolution-based region adversarial prompt tuning on a small frozen-backbone classifier."""
from .attack import AttackConfig, PerturbationBall, pgd_attack, pgd_step, project
from .dataio import LabeledDataset, gen_blobs, gen_two_moons, k_shot_sample, load_csv, save_csv
from .evaluation import accuracy, robust_accuracy, verify_theorem
from .evolution import EvolutionConfig, Population
from .losses import LossWeightState, combined_loss, epoch_weighting
from .model import ModelInitSpec, PromptedClassifier, forward, init_model, load_model, save_model
from .numcore import RandomStream
from .trainer import TrainConfig, run_training

__version__ = "0.1.0"
