"""Recurrent layers: the fo-pooling QRNN, plus simple-RNN and LSTM baselines.

Every layer works on batch-major sequences ``[batch, time, features]`` and
multiplies row vectors from the left, so a projection is ``x @ U``.
"""
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .activations import ActivationKind, sigmoid, tanh
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Variable

INIT_SCHEMES = {"orthogonal": 1.0, "uniform": 0.05, "normal": 0.1}
CELLS = ("qrnn", "lstm")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def init_weights(shape, scheme="orthogonal", scale=None, seed=None) -> np.ndarray:
    """Draw a weight array.

    ``scale`` is the half-width for ``uniform``, the standard deviation for
    ``normal`` and a gain for ``orthogonal``.  Orthogonal matrices have
    orthonormal columns (tall) or rows (wide).
    """
    if scheme not in INIT_SCHEMES:
        raise ContractError(f"unknown init scheme {scheme!r}")
    scale = INIT_SCHEMES[scheme] if scale is None else scale
    rng = _rng(seed)
    shape = tuple(shape)
    if scheme == "uniform":
        return rng.uniform(-scale, scale, size=shape)
    if scheme == "normal":
        return rng.normal(0.0, scale, size=shape)
    if len(shape) != 2:
        raise ContractError(f"orthogonal init needs a 2-d shape, got {shape}")
    rows, cols = shape
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    # C order always: a restored checkpoint must hit the same BLAS kernels
    return np.ascontiguousarray(scale * q)


@dataclass
class RecurrentState:
    """Carried state of one layer.

    ``h`` is only used by the LSTM.  ``x`` holds a QRNN layer's last
    ``width - 1`` inputs so the convolution window continues across segments.
    """

    c: np.ndarray
    h: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None

    def copy(self):
        return RecurrentState(*(None if a is None else a.copy() for a in (self.c, self.h, self.x)))


def _check_state(c, batch, hidden):
    if c.shape != (batch, hidden):
        raise DimensionError(f"state {c.shape} does not match batch {batch} x hidden {hidden}")


class QrnnLayer:
    """Convolutional projections followed by a forget/output-gated scan.

    With a dual activation the candidate uses two projections ``U_c1`` and
    ``U_c2``; otherwise a single ``U_c``.  Gate and candidate biases start at 0.
    """

    def __init__(self, input_size, hidden_size, width=2, activation=ActivationKind("tanh"),
                 init="orthogonal", init_scale=None, seed=None):
        if width < 1 or input_size < 1 or hidden_size < 1:
            raise ContractError("width, input_size and hidden_size must be positive")
        if isinstance(activation, str):
            activation = ActivationKind.parse(activation)
        rng = _rng(seed)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.width = width
        self.activation = activation
        fan_in = width * input_size
        H = hidden_size

        def w(name, cols):
            return T.parameter(init_weights((fan_in, cols), init, init_scale, rng), name)

        self.U_fo = w("U_fo", 2 * H)
        self.b_fo = T.parameter(np.zeros(2 * H), "b_fo")
        if activation.dual:
            self.U_c1 = w("U_c1", H)
            self.b_c1 = T.parameter(np.zeros(H), "b_c1")
            self.U_c2 = w("U_c2", H)
            self.b_c2 = T.parameter(np.zeros(H), "b_c2")
            self._proj = [self.U_fo, self.U_c1, self.U_c2]
            self._bias = [self.b_fo, self.b_c1, self.b_c2]
        else:
            self.U_c = w("U_c", H)
            self.b_c = T.parameter(np.zeros(H), "b_c")
            self._proj = [self.U_fo, self.U_c]
            self._bias = [self.b_fo, self.b_c]

    def named_parameters(self):
        names = ["U_fo", "b_fo"] + (["U_c1", "b_c1", "U_c2", "b_c2"] if self.activation.dual else ["U_c", "b_c"])
        return [(n, getattr(self, n)) for n in names]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    @staticmethod
    def count_parameters(input_size, hidden_size, width, dual):
        streams = 4 if dual else 3
        return streams * hidden_size * (width * input_size + 1)

    @property
    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def initial_state(self, batch):
        return RecurrentState(np.zeros((batch, self.hidden_size)))

    def _gates_and_candidate(self, pre, H):
        """Split packed pre-activations ``[..., k*H]`` into f, o and the candidate."""
        ax = pre.value.ndim - 1
        f = sigmoid(T.slice_axis(pre, ax, 0, H))
        o = sigmoid(T.slice_axis(pre, ax, H, 2 * H))
        a = T.slice_axis(pre, ax, 2 * H, 3 * H)
        if self.activation.dual:
            z = self.activation(a, T.slice_axis(pre, ax, 3 * H, 4 * H))
        else:
            z = self.activation(a)
        return f, o, z

    def _project(self, rows):
        U = T.concat(self._proj, axis=1)
        b = T.concat(self._bias, axis=0)
        return T.add_bias(T.matmul(rows, U), b)

    def step(self, window, c_prev):
        """One fo-pooling step from an explicit window ``[batch, width*input]``.

        Returns ``(c_t, h_t)``.
        """
        window, c_prev = T.as_variable(window), T.as_variable(c_prev)
        if window.value.ndim != 2 or window.shape[1] != self.width * self.input_size:
            raise DimensionError(f"window {window.shape} does not match width*input = "
                                 f"{self.width * self.input_size}")
        _check_state(c_prev.value, window.shape[0], self.hidden_size)
        f, o, z = self._gates_and_candidate(self._project(window), self.hidden_size)
        c = c_prev * f + z * (1.0 - f)
        return c, c * o

    def forward(self, x, state: Optional[RecurrentState] = None):
        """Run the layer over ``x [B, T, input]``.

        Returns ``(h, cells, new_state)`` where ``cells`` holds every ``c_t``
        and ``new_state`` is the detached final cell state plus the input tail
        that feeds the next segment's first windows.
        """
        x = T.as_variable(x)
        if x.value.ndim != 3 or x.shape[2] != self.input_size:
            raise DimensionError(f"input {x.shape} does not match input_size {self.input_size}")
        B, L, _ = x.shape
        H = self.hidden_size
        state = state or self.initial_state(B)
        _check_state(state.c, B, H)
        rows = T.reshape(T.causal_windows(x, self.width, state.x), (B * L, self.width * self.input_size))
        pre = T.reshape(self._project(rows), (B, L, -1))
        f, o, z = self._gates_and_candidate(pre, H)
        cells = T.fo_pool(f, z, Variable(state.c))
        h = cells * o
        history = np.zeros((B, self.width - 1, self.input_size)) if state.x is None else state.x
        tail = np.concatenate([history, x.value], axis=1)[:, L:]
        return h, cells, RecurrentState(cells.value[:, -1].copy(), x=tail.copy())


class LstmCell:
    """Standard LSTM with gate order (input, forget, output, candidate)."""

    def __init__(self, input_size, hidden_size, init="orthogonal", init_scale=None, seed=None):
        rng = _rng(seed)
        self.input_size = input_size
        self.hidden_size = hidden_size
        H = hidden_size
        self.W_x = T.parameter(np.concatenate(
            [init_weights((input_size, H), init, init_scale, rng) for _ in range(4)], axis=1), "W_x")
        self.W_h = T.parameter(np.concatenate(
            [init_weights((H, H), init, init_scale, rng) for _ in range(4)], axis=1), "W_h")
        self.b = T.parameter(np.zeros(4 * H), "b")

    def named_parameters(self):
        return [("W_x", self.W_x), ("W_h", self.W_h), ("b", self.b)]

    def parameters(self):
        return [self.W_x, self.W_h, self.b]

    @staticmethod
    def count_parameters(input_size, hidden_size):
        return 4 * hidden_size * (input_size + hidden_size + 1)

    def initial_state(self, batch):
        z = np.zeros((batch, self.hidden_size))
        return RecurrentState(z, z.copy())

    def _cell(self, xw, h, c):
        H = self.hidden_size
        z = xw + T.matmul(h, self.W_h)
        gates = sigmoid(T.slice_axis(z, 1, 0, 3 * H))
        i = T.slice_axis(gates, 1, 0, H)
        f = T.slice_axis(gates, 1, H, 2 * H)
        o = T.slice_axis(gates, 1, 2 * H, 3 * H)
        g = tanh(T.slice_axis(z, 1, 3 * H, 4 * H))
        c = f * c + i * g
        return o * tanh(c), c

    def step(self, x_t, h, c):
        """One step from ``x_t [B, input]``; returns ``(h_t, c_t)``."""
        x_t = T.as_variable(x_t)
        xw = T.add_bias(T.matmul(x_t, self.W_x), self.b)
        return self._cell(xw, T.as_variable(h), T.as_variable(c))

    def forward(self, x, state: Optional[RecurrentState] = None):
        """Returns ``(h, cells, new_state)`` like :meth:`QrnnLayer.forward`.

        Input projections are batched over time; the hidden-to-hidden
        product has to run once per step.
        """
        x = T.as_variable(x)
        if x.value.ndim != 3 or x.shape[2] != self.input_size:
            raise DimensionError(f"input {x.shape} does not match input_size {self.input_size}")
        B, L, _ = x.shape
        state = state or self.initial_state(B)
        _check_state(state.c, B, self.hidden_size)
        _check_state(state.h, B, self.hidden_size)
        xw = T.reshape(T.add_bias(T.matmul(T.reshape(x, (B * L, self.input_size)), self.W_x), self.b),
                       (B, L, 4 * self.hidden_size))
        h, c = Variable(state.h), Variable(state.c)
        hs, cs = [], []
        for t in range(L):
            h, c = self._cell(T.index_axis(xw, 1, t), h, c)
            hs.append(h)
            cs.append(c)
        return (T.stack(hs, axis=1), T.stack(cs, axis=1),
                RecurrentState(c.value.copy(), h.value.copy()))


class SimpleRnnCell:
    """``h_t = g(h_{t-1} @ W + x_t @ U + b)`` with a single-stream activation."""

    def __init__(self, input_size, hidden_size, activation="tanh", W=None, U=None, b=None, seed=None):
        if isinstance(activation, str):
            activation = ActivationKind.parse(activation)
        if activation.dual:
            raise ContractError("the simple RNN takes a single-stream activation")
        rng = _rng(seed)
        self.activation = activation
        self.W = T.parameter(init_weights((hidden_size, hidden_size), "orthogonal", None, rng) if W is None else W, "W")
        self.U = T.parameter(init_weights((input_size, hidden_size), "orthogonal", None, rng) if U is None else U, "U")
        self.b = T.parameter(np.zeros(hidden_size) if b is None else b, "b")
        if self.W.shape != (hidden_size, hidden_size):
            raise DimensionError(f"W must be square {hidden_size}x{hidden_size}, got {self.W.shape}")

    def parameters(self):
        return [self.W, self.U, self.b]

    def forward(self, x, h0):
        """Returns the hidden states ``[B, T, H]``."""
        x, h = T.as_variable(x), T.as_variable(h0)
        if x.value.ndim != 3 or x.shape[2] != self.U.shape[0]:
            raise DimensionError(f"input {x.shape} does not match U {self.U.shape}")
        hs = []
        for t in range(x.shape[1]):
            h = self.activation(T.add_bias(T.matmul(h, self.W) + T.matmul(T.index_axis(x, 1, t), self.U), self.b))
            hs.append(h)
        return T.stack(hs, axis=1)


@dataclass(frozen=True)
class StackConfig:
    """Architecture of a recurrent stack; serialises to canonical ``key=value`` text."""

    layers: int = 2
    hidden_size: Union[int, tuple] = 128
    first_width: int = 6
    width: int = 2
    activation: str = "drelu"
    alpha: float = 1.0
    dropout: float = 0.0
    dense: bool = False
    cell: str = "qrnn"
    init: str = "orthogonal"
    init_scale: Optional[float] = None

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.first_width < 1 or self.width < 1:
            raise ConfigError("convolution widths must be >= 1")
        if self.cell not in CELLS:
            raise ConfigError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"init must be one of {tuple(INIT_SCHEMES)}, got {self.init!r}")
        ActivationKind.parse(self.activation, self.alpha)
        if isinstance(self.hidden_size, (list, tuple)):
            sizes = tuple(int(h) for h in self.hidden_size)
            if len(sizes) != self.layers:
                raise ConfigError(f"{len(sizes)} hidden sizes for {self.layers} layers")
            object.__setattr__(self, "hidden_size", sizes if len(set(sizes)) > 1 else sizes[0])
        if min(self.hidden_sizes) < 1:
            raise ConfigError("hidden sizes must be positive")
        if self.init_scale is None:
            object.__setattr__(self, "init_scale", INIT_SCHEMES[self.init])

    @property
    def hidden_sizes(self):
        if isinstance(self.hidden_size, tuple):
            return self.hidden_size
        return (self.hidden_size,) * self.layers

    @property
    def activation_kind(self):
        return ActivationKind.parse(self.activation, self.alpha)

    def input_sizes(self, d_in):
        sizes = []
        for i in range(self.layers):
            if self.dense:
                sizes.append(d_in + sum(self.hidden_sizes[:i]))
            else:
                sizes.append(d_in if i == 0 else self.hidden_sizes[i - 1])
        return sizes

    def to_text(self) -> str:
        out = []
        for k, v in sorted(asdict(self).items()):
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{k}={v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StackConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, _, v = line.partition("=")
            if k not in kinds:
                raise ConfigError(f"unknown stack key {k!r}")
            kw[k] = _parse_field(k, v)
        return cls(**kw)


def _parse_field(key, v):
    if key in ("layers", "first_width", "width"):
        return int(v)
    if key == "hidden_size":
        parts = [int(p) for p in v.split(",")]
        return parts[0] if len(parts) == 1 else tuple(parts)
    if key in ("alpha", "dropout", "init_scale"):
        return float(v)
    if key == "dense":
        if v.lower() not in ("true", "false"):
            raise ConfigError(f"dense must be true or false, got {v!r}")
        return v.lower() == "true"
    return v


@dataclass
class StackOutput:
    output: Variable
    states: list
    cells: list = field(default_factory=list)
    inputs: list = field(default_factory=list)


class Stack:
    """Layers applied in sequence, optionally densely connected.

    With ``dense`` every layer reads the concatenation of the stack input and
    all earlier layer outputs; the stack output is the last layer's output.
    """

    def __init__(self, config: StackConfig, input_size: int, seed=None):
        rng = _rng(seed)
        self.config = config
        self.input_size = input_size
        self.layers = []
        for i, (d_in, H) in enumerate(zip(config.input_sizes(input_size), config.hidden_sizes)):
            if config.cell == "lstm":
                layer = LstmCell(d_in, H, config.init, config.init_scale, rng)
            else:
                width = config.first_width if i == 0 else config.width
                layer = QrnnLayer(d_in, H, width, config.activation_kind, config.init, config.init_scale, rng)
            self.layers.append(layer)

    @property
    def output_size(self):
        return self.config.hidden_sizes[-1]

    def named_parameters(self):
        return [(f"layer{i}.{n}", p) for i, layer in enumerate(self.layers) for n, p in layer.named_parameters()]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def initial_states(self, batch):
        return [layer.initial_state(batch) for layer in self.layers]

    def forward(self, x, states=None, training=False, rng=None, retain_inputs=False) -> StackOutput:
        x = T.as_variable(x)
        states = states if states is not None else self.initial_states(x.shape[0])
        if len(states) != len(self.layers):
            raise ContractError(f"{len(states)} states for {len(self.layers)} layers")
        p = self.config.dropout
        if training and p > 0 and rng is None:
            raise ContractError("training with dropout needs an rng")
        outputs, new_states, cells, inputs = [], [], [], []
        for i, (layer, state) in enumerate(zip(self.layers, states)):
            if i == 0:
                inp = x
            elif self.config.dense:
                inp = T.concat([x] + outputs, axis=2)
            else:
                inp = outputs[-1]
            if retain_inputs:
                if not inp.requires_grad:
                    inp = T.Variable(inp.value, requires_grad=True)
                inp.retain_grad()
            inputs.append(inp)
            h, c, st = layer.forward(inp, state)
            if training and p > 0:
                h = T.dropout(h, p, rng)
            outputs.append(h)
            new_states.append(st)
            cells.append(c)
        return StackOutput(outputs[-1], new_states, cells, inputs)
