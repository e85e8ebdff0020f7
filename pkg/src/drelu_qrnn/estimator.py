"""scikit-learn style wrapper around the character language model."""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .analysis import cell_state_stats
from .layers import StackConfig
from .lm import BatchStream, CharVocab, LmModel, evaluate
from .train import TrainConfig, Trainer


def check_text(X):
    """Accept a string or an iterable of strings; returns one newline-joined string."""
    if isinstance(X, str):
        text = X
    elif isinstance(X, np.ndarray) and X.ndim == 0:
        text = str(X)
    else:
        try:
            parts = list(X)
        except TypeError:
            raise TypeError(f"expected text or an iterable of texts, got {type(X).__name__}") from None
        if not all(isinstance(p, str) for p in parts):
            raise TypeError("every document must be a str")
        text = "\n".join(parts)
    if len(text) < 2:
        raise ValueError("need at least two characters of text")
    return text


class QRNNLanguageModel(TransformerMixin, BaseEstimator):
    """Character-level QRNN language model.

    ``fit`` trains on raw text, ``score`` returns negative bits per character
    (higher is better), and ``transform`` maps text to the last layer's
    hidden state at every character position.

    Parameters mirror the ``[model]``, ``[data]`` and ``[optim]`` sections of
    the command-line configuration.
    """

    def __init__(self, layers=2, hidden_size=128, activation="drelu", alpha=1.0, embedding_size=50,
                 first_width=6, width=2, dropout=0.0, dense=False, init="orthogonal", batch_size=16,
                 seq_len=64, lr=3e-4, clip_norm=5.0, max_steps=500, random_state=0):
        self.layers = layers
        self.hidden_size = hidden_size
        self.activation = activation
        self.alpha = alpha
        self.embedding_size = embedding_size
        self.first_width = first_width
        self.width = width
        self.dropout = dropout
        self.dense = dense
        self.init = init
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.lr = lr
        self.clip_norm = clip_norm
        self.max_steps = max_steps
        self.random_state = random_state

    def _stack_config(self):
        return StackConfig(self.layers, self.hidden_size, self.first_width, self.width, self.activation,
                           self.alpha, self.dropout, self.dense, "qrnn", self.init)

    def fit(self, X, y=None):
        text = check_text(X)
        seed = 0 if self.random_state is None else int(self.random_state)
        self.vocab_ = CharVocab.build(text, unknown=True)
        self.model_ = LmModel(len(self.vocab_), self._stack_config(), self.embedding_size, seed=seed)
        stream = BatchStream(self.vocab_.encode(text), self.batch_size, self.seq_len)
        cfg = TrainConfig(lr=self.lr, clip_norm=self.clip_norm, max_steps=self.max_steps, seed=seed,
                          log_timing=False)
        self.history_ = Trainer(self.model_, stream, cfg, self.vocab_).run()
        self.n_features_out_ = self.model_.stack.output_size
        return self

    def bpc(self, X):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, self.vocab_.encode(check_text(X)), self.seq_len)

    def score(self, X, y=None):
        return -self.bpc(X)

    def transform(self, X):
        check_is_fitted(self, "model_")
        ids = self.vocab_.encode(check_text(X))
        states = self.model_.initial_states(1)
        outs = []
        for start in range(0, len(ids), self.seq_len):
            _, out = self.model_.forward(ids[start:start + self.seq_len][None], states)
            outs.append(out.output.value[0])
            states = out.states
        return np.concatenate(outs, axis=0)

    def cell_state_stats(self, X, tau=0.1):
        check_is_fitted(self, "model_")
        return cell_state_stats(self.model_, self.vocab_.encode(check_text(X)), tau, self.seq_len)
