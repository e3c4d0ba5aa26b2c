"""Kernel-filtering linear overparameterization for CNN training.

During training every filtering layer (conv or fully connected) is
parameterized as a widened base kernel followed by a cascade of pointwise
channel-mixing kernels. The cascade filters the base kernel itself,
reshaped to a 1D signal, so the effective kernel is produced before it
touches the input; after training the cascade is multiplied through
("collapsed") and discarded, leaving the plain architecture with zero
inference overhead.
"""

from . import autodiff, backends, block, data, model, serialize, tensor
from .autodiff import Param, Tape, finite_diff_check
from .backends import BACKEND
from .block import (KfloBlock, collapse, collapsed_kernel, expand,
                    feature_filter_oracle, flop_count,
                    reshape_kernel_to_signal, reshape_signal_to_kernel,
                    tl_stack_init)
from .data import Dataset, load_cifar10_bin, load_mnist_idx, subset_per_class
from .model import (ModelGraph, build_lenet5, build_smallcnn, collapse_model,
                    forward, forward_on_tape, iter_params, param_count)
from .serialize import load_model, save_model
from .tensor import (ConvGeometry, Tensor, as_tensor, conv2d, fc_forward,
                     global_avg_pool, maxpool2d, pointwise_conv1d, relu,
                     softmax_cross_entropy)
from .train import (MetricsRecord, TrainConfig, ema_update, evaluate,
                    evaluate_with, sgd_step, train)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConvGeometry", "Dataset", "KfloBlock", "MetricsRecord",
    "ModelGraph", "Param", "Tape", "Tensor", "TrainConfig", "as_tensor",
    "build_lenet5", "build_smallcnn", "collapse", "collapse_model",
    "collapsed_kernel", "conv2d", "ema_update", "evaluate", "evaluate_with",
    "expand", "fc_forward", "feature_filter_oracle", "finite_diff_check",
    "flop_count", "forward", "forward_on_tape", "global_avg_pool",
    "iter_params", "load_cifar10_bin", "load_mnist_idx", "load_model",
    "maxpool2d", "param_count", "pointwise_conv1d", "relu",
    "reshape_kernel_to_signal", "reshape_signal_to_kernel", "save_model",
    "sgd_step", "softmax_cross_entropy", "subset_per_class", "tl_stack_init",
    "train",
]
