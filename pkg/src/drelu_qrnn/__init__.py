"""Dual rectified linear units for quasi-recurrent networks."""
from .activations import ActivationKind, delu, drelu, elu, relu, sigmoid, tanh
from .errors import ConfigError, ContractError, DataError, DimensionError, NumericalError
from .estimator import QRNNLanguageModel
from .layers import LstmCell, QrnnLayer, RecurrentState, SimpleRnnCell, Stack, StackConfig, init_weights
from .lm import BatchStream, CharVocab, LmModel, bpc, evaluate, synthetic_corpus
from .tensor import Tape, Variable, parameter
from .train import Adam, Checkpoint, TrainConfig, Trainer, clip_global_norm

__version__ = "0.1.0"
