"""Two-branch monocular depth estimation with uncertainty-weighted fusion."""

from .datasets import AugmentationConfig, Sample, augment, crop_black_border, generate_toy_colon, load_dataset
from .fusion import DepthModel, ModelConfig, ModelOutput, confidence, fuse, model_forward
from .geometry import CameraIntrinsics, PointCloud, backproject, read_ply, write_ply
from .losses import LossWeights, depth_loss, edge_loss, gaussian_map_objective, map_loss, total_loss
from .metrics import MetricReport, compute_metrics, median_scale
from .trainer import TrainConfig, finetune, load_checkpoint, pretrain_branch, save_checkpoint, train
from .uncertainty_eval import oracle_curve, sparsification_curve, sparsification_error

__version__ = "0.1.0"
