"""Minimal float64 layer stack with explicit backpropagation."""

from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .functional import (
    batchnorm1d_backward,
    batchnorm1d_forward,
    conv1d_backward,
    conv1d_forward,
    conv1d_output_length,
    linear_backward,
    linear_forward,
    lstm_backward,
    lstm_forward,
    mae_loss,
    maxpool1d_backward,
    maxpool1d_forward,
    relu_backward,
    relu_forward,
)
from .gradcheck import grad_check, relative_error
from .layers import LSTM, BatchNorm1d, Conv1d, Layer, Linear, MaxPool1d, ReLU
from .optim import (
    EarlyStopping,
    OptimizerState,
    ReduceLROnPlateau,
    adam_step,
    plateau_scheduler,
)
