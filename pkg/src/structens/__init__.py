"""Structured sub-network ensembles extracted from one untrained network, plus mask-based continual learning."""
from .autograd import SGD, Tensor, no_grad
from .config import ExperimentConfig, load_config, parse_config
from .continual import MaskLedger, allocate_task, cl_accuracy, masked_forward, memory_account, train_task
from .data import DatasetHandle, load_idx, make_synthetic, split_tasks
from .diversity import diversity_penalty, mmd2
from .extraction import SubnetBlueprint, extract_ensemble, extract_subnetwork
from .metrics import PredictionBatch, combine, diversity_score, ece, fgsm, uncertainty_filter
from .network import Architecture, Network, build_network, init_scaling_sets, lenet5, mlp, vgg11_half
from .pipeline import ReportBundle, run_cl_pipeline, run_ensemble_pipeline
from .saliency import compute_saliency, prune_indices, threshold, train_scaling

__version__ = "0.1.0"
