"""Desk-scale measurements: cell-state sparsity, state explosion, gradient
flow across depth and QRNN/LSTM throughput."""
import statistics
import time
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError
from .layers import SimpleRnnCell, Stack, StackConfig, init_weights
from .lm import LmModel


@dataclass
class ActivationStats:
    """Share of cell-state coordinates in (-tau, tau), <= -tau and >= tau."""

    near_zero: float
    negative: float
    positive: float
    tau: float
    count: int

    @classmethod
    def from_counts(cls, near, neg, pos, tau):
        n = near + neg + pos
        if n == 0:
            raise DataError("no cell states to summarise")
        return cls(near / n, neg / n, pos / n, tau, n)


class StatsAccumulator:
    def __init__(self, tau=0.1):
        if not tau > 0:
            raise ContractError(f"tau must be positive, got {tau}")
        self.tau = tau
        self.near = self.neg = self.pos = 0

    def update(self, c: np.ndarray):
        near = int(np.count_nonzero(np.abs(c) < self.tau))
        neg = int(np.count_nonzero(c <= -self.tau))
        self.near += near
        self.neg += neg
        self.pos += c.size - near - neg

    def result(self) -> ActivationStats:
        return ActivationStats.from_counts(self.near, self.neg, self.pos, self.tau)


def cell_state_stats(model: LmModel, ids, tau=0.1, seq_len=100):
    """Per-layer :class:`ActivationStats` of every ``c_t`` over one inference pass."""
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        raise DataError("empty stream")
    accs = [StatsAccumulator(tau) for _ in model.stack.layers]
    states = model.initial_states(1)
    for start in range(0, len(ids), seq_len):
        _, out = model.forward(ids[start:start + seq_len][None], states)
        for acc, c in zip(accs, out.cells):
            acc.update(c.value)
        states = out.states
    return [a.result() for a in accs]


def exploding_state_demo(activation="relu", rho=1.1, steps=100, dim=32, seed=0, basis="permutation"):
    """L2 norms ``||h_t||`` for ``t = 0..steps`` of ``h_t = g(h_{t-1} @ W)``.

    ``W = rho * Q`` with ``Q`` a random permutation matrix (``basis="permutation"``,
    an orthogonal matrix whose top eigenvector is positive) or a Haar-random
    orthogonal matrix (``basis="haar"``).  ``h_0`` is uniform on (0, 1).
    """
    if not rho > 0 or steps < 1:
        raise ContractError("rho must be positive and steps >= 1")
    rng = np.random.default_rng(seed)
    if basis == "permutation":
        Q = np.eye(dim)[rng.permutation(dim)]
    elif basis == "haar":
        Q = init_weights((dim, dim), "orthogonal", 1.0, rng)
    else:
        raise ContractError(f"unknown basis {basis!r}")
    h0 = rng.uniform(0.0, 1.0, size=(1, dim))
    cell = SimpleRnnCell(1, dim, activation, W=rho * Q, U=np.zeros((1, dim)))
    hs = cell.forward(np.zeros((1, steps, 1)), h0).value[0]
    return np.concatenate([[np.linalg.norm(h0)], np.linalg.norm(hs, axis=1)]), hs


@dataclass
class DepthProbe:
    norms: list
    ratio: float


def gradient_depth_probe(stack: Stack, x, seed=0) -> DepthProbe:
    """Norm of dLoss/d(layer input) for each layer after one backward pass.

    The loss is the cross-entropy of a fixed random readout against random
    targets.  ``ratio`` is first-layer norm over last-layer norm.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    B, L, _ = x.shape
    V = 16
    W = T.Variable(rng.normal(0.0, 1.0 / np.sqrt(stack.output_size), (stack.output_size, V)))
    targets = rng.integers(0, V, B * L)
    with T.Tape() as tape:
        out = stack.forward(x, retain_inputs=True)
        loss = T.softmax_cross_entropy(T.matmul(T.reshape(out.output, (B * L, stack.output_size)), W), targets)
    tape.backward(loss)
    norms = [float(np.linalg.norm(v.grad)) if v.grad is not None else 0.0 for v in out.inputs]
    T.zero_grad(stack.parameters())
    return DepthProbe(norms, norms[0] / norms[-1] if norms[-1] > 0 else float("inf"))


@dataclass
class ThroughputReport:
    model: str
    hidden_size: int
    batch: int
    seq_len: int
    forward_tps: float
    train_tps: float
    ratio: float = 1.0

    @staticmethod
    def header():
        return "\t".join(f.name for f in fields(ThroughputReport))

    def to_line(self):
        return "\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in astuple(self))


def _time_once(stack, x):
    t0 = time.perf_counter()
    stack.forward(x)
    t1 = time.perf_counter()
    with T.Tape() as tape:
        out = stack.forward(x)
        loss = T.mean(out.output)
    tape.backward(loss)
    t2 = time.perf_counter()
    tape.clear()
    T.zero_grad(stack.parameters())
    return t1 - t0, t2 - t1


def throughput_bench(subject: StackConfig, baseline: StackConfig, input_size=None, batch=32, seq_len=100,
                     repeats=5, warmup=3, seed=0):
    """Median tokens/sec of forward and forward+backward for two stacks.

    Repeats alternate between the two stacks so slow drift in machine load
    hits both alike.  Returns ``(subject_report, baseline_report)``; ratios
    are subject over baseline on the forward+backward rate.
    """
    if subject.hidden_sizes != baseline.hidden_sizes:
        raise ContractError("benchmarked stacks must have matched hidden sizes")
    d = input_size or subject.hidden_sizes[0]
    x = np.random.default_rng(seed).normal(size=(batch, seq_len, d))
    tokens = batch * seq_len
    stacks = [Stack(cfg, d, seed) for cfg in (subject, baseline)]
    times = [([], []), ([], [])]
    for i in range(warmup + repeats):
        for stack, (fwd, both) in zip(stacks, times):
            f, b = _time_once(stack, x)
            if i >= warmup:
                fwd.append(f)
                both.append(b)
    reports = []
    for cfg, (fwd, both) in zip((subject, baseline), times):
        tag = cfg.cell if cfg.cell == "lstm" else f"qrnn-{cfg.activation}"
        reports.append(ThroughputReport(tag, cfg.hidden_sizes[0], batch, seq_len,
                                        tokens / statistics.median(fwd), tokens / statistics.median(both)))
    subj, base = reports
    subj.ratio = subj.train_tps / base.train_tps
    base.ratio = 1.0
    return subj, base


def format_table(header, rows):
    """Fixed-width text table."""
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)
