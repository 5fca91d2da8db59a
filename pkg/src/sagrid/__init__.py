"""Two-branch attention-grid network for person re-identification.

A self-contained numpy library: tensor core with reverse-mode autodiff,
the neural layers it needs, the attention-grid module, a mini residual
backbone, the training pipeline, retrieval metrics with k-reciprocal
re-ranking, dataset tooling, and a CLI (`sagrid`).
"""

from .attention import AttentionGrid, SagModule, apply_grid, compute_grid, downsample_high, sag_forward
from .data import DatasetManifest, SynthSpec, generate_synthetic, load_image, save_image, scan_market_dir
from .layers import (
    BatchNorm2d,
    Conv2d,
    Linear,
    bilinear_upsample_x2,
    cross_entropy,
    global_avg_pool,
    he_init,
    l2_normalize,
    maxpool2d,
    resize_bilinear,
    spatial_softmax,
)
from .model import BackboneConfig, TwoBranchModel, build_model, load_checkpoint, save_checkpoint
from .retrieval import EmbeddingSet, EvalReport, cmc_map, evaluate, k_reciprocal_rerank, pairwise_l2
from .tensor import (
    Parameter,
    ShapeMismatchError,
    Tensor,
    finite_difference_grad,
    no_grad,
    use_dtype,
)
from .train import SGD, TrainConfig, augment, lr_at, train

__version__ = "0.1.0"
