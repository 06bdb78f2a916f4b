"""Multi-dataset pretraining of per-pixel embeddings with class prototypes, at desk scale."""

__version__ = "0.1.0"

import os as _os

# MDP_THREADS caps the BLAS pools; it has to be set before numpy loads them
if _os.environ.get("MDP_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["MDP_THREADS"])

from .errors import (
    ConfigError,
    DataError,
    DegenerateEmbeddingError,
    FormatError,
    MDPError,
    NumericalError,
    ShapeError,
    UsageError,
)
from .diffcore import Graph, Tensor, grad_check
from .datasets import (
    IGNORE_ID,
    LabelRegistry,
    Sample,
    SyntheticSpec,
    benchmark_spec,
    build_label_registry,
    generate_synthetic_dataset,
    load_sample,
    map_local_to_global,
    save_sample,
)
from .augment import AugConfig, cutmix, make_views, mixup
from .prototypes import PrototypeBank, RegionBank, snapshot, topk_similar, update_bank
from .losses import info_nce, mixed_loss, pixel_to_pixel, pixel_to_prototype, sparse_coding
from .encoder import EncoderConfig, EncoderParams, forward_embed, init_encoder, momentum_update
from .evaluation import embedding_quality, linear_probe, miou, nearest_prototype_miou, nearest_prototype_predict
from .trainer import TrainConfig, cosine_lr, load_checkpoint, pretrain_run, save_checkpoint, sgd_step
