"""Tensor-decomposition layers and networks on plain numpy."""

from .autodiff import Tape, Variable, backward, check_gradients
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import *  # noqa: F401,F403
from .formats import (
    CoreSet,
    Format,
    TDConfig,
    compression_ratio,
    contraction_plan,
    init_cores,
    param_count,
    reconstruct,
    validate,
)
from .layers import (
    BatchNorm,
    DenseConv2D,
    DenseLinear,
    Flatten,
    MaxPool2D,
    ParamInfo,
    ReLU,
    TDConv2D,
    TDLinear,
    im2col,
    layer_param_info,
)
from .mnist import Dataset, load_mnist_idx
from .networks import build_td_lenet5, build_td_lstm, build_td_resnet, build_tr_demo_classifier, lstm_step
from .optim import Adam, SGD, adam_step, sgd_step
from .tensor import DenseTensor, contract, elementwise, permute, reshape, scale
from .training import evaluate, train_epochs

__version__ = "0.1.0"
