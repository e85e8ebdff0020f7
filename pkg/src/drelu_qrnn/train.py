"""Adam, global-norm clipping, DQR1 checkpoints and the truncated-BPTT loop."""
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, DimensionError, NumericalError
from .layers import RecurrentState, StackConfig
from .lm import BatchStream, CharVocab, LmModel, bpc, evaluate

log = logging.getLogger(__name__)

MAGIC = b"DQR1"


def clip_global_norm(grads, max_norm):
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``; gradients are left untouched when the
    norm does not exceed the limit.
    """
    if not max_norm > 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    # numpy's pairwise sum, unlike BLAS dot, does not depend on array alignment,
    # so a restored run reproduces the norm bit for bit
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        k = max_norm / norm
        return [g * k for g in grads], norm
    return list(grads), norm


class Adam:
    """Bias-corrected Adam over a fixed list of parameters."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise DimensionError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise DimensionError(f"gradient {g.shape} for parameter {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    max_steps: int = 1000
    log_interval: int = 1
    eval_interval: int = 0
    checkpoint_interval: int = 0
    patience: int = 0
    seed: int = 0
    log_timing: bool = True


@dataclass
class StepRecord:
    step: int
    nats: float
    bpc: float
    grad_norm: float
    tokens_per_sec: Optional[float] = None

    def to_line(self) -> str:
        tps = "-" if self.tokens_per_sec is None else f"{self.tokens_per_sec:.1f}"
        return f"{self.step}\t{self.nats!r}\t{self.bpc!r}\t{self.grad_norm!r}\t{tps}"

    @classmethod
    def from_line(cls, line: str) -> "StepRecord":
        step, nats, bits, gn, tps = line.rstrip("\n").split("\t")
        return cls(int(step), float(nats), float(bits), float(gn), None if tps == "-" else float(tps))


# --- checkpoint container -------------------------------------------------

def _u64(n):
    return struct.pack("<Q", n)


def _write_blob(buf, data: bytes):
    buf += _u64(len(data))
    buf += data


def _write_tensors(buf, tensors):
    buf += _u64(len(tensors))
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f8")
        _write_blob(buf, name.encode("utf-8"))
        buf += _u64(arr.ndim)
        for d in arr.shape:
            buf += _u64(d)
        buf += np.ascontiguousarray(arr).tobytes()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise DataError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def blob(self):
        return self.take(self.u64())

    def tensors(self):
        out = []
        for _ in range(self.u64()):
            name = self.blob().decode("utf-8")
            dims = tuple(self.u64() for _ in range(self.u64()))
            n = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
            out.append((name, arr))
        return out


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume its training run.

    ``optimizer`` also carries the recurrent state and stream cursors so a
    resumed run continues on the same batches with the same carried state.
    """

    descriptor: str
    params: list
    optimizer: list = field(default_factory=list)
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = bytearray(MAGIC)
        _write_blob(buf, self.descriptor.encode("utf-8"))
        _write_tensors(buf, self.params)
        _write_tensors(buf, self.optimizer)
        buf += _u64(self.step)
        _write_blob(buf, json.dumps(self.rng_state, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        return bytes(buf)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise DataError("not a DQR1 checkpoint (bad magic bytes)")
        r = _Reader(data)
        r.take(4)
        descriptor = r.blob().decode("utf-8")
        params = r.tensors()
        optimizer = r.tensors()
        step = r.u64()
        rng_state = json.loads(r.blob().decode("utf-8"))
        if r.pos != len(data):
            raise DataError("trailing bytes after checkpoint payload")
        return cls(descriptor, params, optimizer, step, rng_state)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise DataError(f"cannot read checkpoint {path}: {e.strerror}") from None
        return cls.from_bytes(data)

    @property
    def optimizer_dict(self):
        return dict(self.optimizer)


def describe(model: LmModel, vocab: CharVocab) -> str:
    """Canonical architecture text: sorted ``key=value`` lines."""
    lines = {"embedding_size": str(model.embedding_size),
             "vocab": ",".join(vocab.to_text().split())}
    for line in model.config.to_text().splitlines():
        k, _, v = line.partition("=")
        lines["stack." + k] = v
    return "".join(f"{k}={lines[k]}\n" for k in sorted(lines))


def parse_descriptor(text: str):
    """Returns ``(stack_config, embedding_size, vocab)``."""
    kv = dict(line.partition("=")[::2] for line in text.splitlines() if line)
    try:
        vocab = CharVocab.from_text(kv["vocab"].replace(",", "\n"))
        stack = StackConfig.from_text("\n".join(f"{k[6:]}={v}" for k, v in kv.items() if k.startswith("stack.")))
        return stack, int(kv["embedding_size"]), vocab
    except KeyError as e:
        raise DataError(f"checkpoint descriptor lacks {e.args[0]!r}") from None


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild ``(model, vocab)`` with the stored parameter values."""
    stack, emb, vocab = parse_descriptor(ckpt.descriptor)
    model = LmModel(len(vocab), stack, emb, seed=0)
    load_parameters(model, ckpt.params)
    return model, vocab


def load_parameters(model, named):
    own = model.named_parameters()
    if [n for n, _ in own] != [n for n, _ in named]:
        raise DataError("checkpoint parameters do not match the model architecture")
    for (name, p), (_, arr) in zip(own, named):
        if p.shape != arr.shape:
            raise DataError(f"parameter {name}: checkpoint shape {arr.shape} vs model {p.shape}")
        p.value = arr.copy()


# --- training loop --------------------------------------------------------

class Trainer:
    """One truncated-BPTT training run over a :class:`BatchStream`."""

    def __init__(self, model: LmModel, stream: BatchStream, config: TrainConfig, vocab: CharVocab = None):
        self.model = model
        self.stream = stream
        self.config = config
        self.vocab = vocab
        self.params = model.parameters()
        self.optimizer = Adam(self.params, config.lr, config.beta1, config.beta2, config.eps)
        self.rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
        self.states = model.initial_states(stream.batch_size)
        self.step = 0
        self.last_grad_norm = float("nan")

    def train_step(self) -> StepRecord:
        t0 = time.perf_counter()
        ids, targets, wrapped = self.stream.next_batch()
        if wrapped:
            # carried state belongs to the text before the wrap point
            self.states = self.model.initial_states(self.stream.batch_size)
        with T.Tape() as tape:
            loss, out = self.model.loss(ids, targets, self.states, training=True, rng=self.rng)
        nats = float(loss.value)
        if not math.isfinite(nats):
            raise NumericalError(f"non-finite loss at step {self.step + 1} "
                                 f"(last grad norm {self.last_grad_norm!r})")
        tape.backward(loss)
        tape.clear()
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        grads, norm = clip_global_norm(grads, self.config.clip_norm)
        if not math.isfinite(norm):
            raise NumericalError(f"non-finite gradient norm at step {self.step + 1} "
                                 f"(last grad norm {self.last_grad_norm!r})")
        self.optimizer.step(grads)
        T.zero_grad(self.params)
        self.states = out.states
        self.step += 1
        self.last_grad_norm = norm
        tps = ids.size / (time.perf_counter() - t0) if self.config.log_timing else None
        return StepRecord(self.step, nats, bpc(nats), norm, tps)

    # checkpoint support

    def checkpoint(self) -> Checkpoint:
        opt = [("adam.hyper", np.array([self.optimizer.lr, self.optimizer.beta1,
                                        self.optimizer.beta2, self.optimizer.eps])),
               ("adam.t", np.array([float(self.optimizer.t)]))]
        names = [n for n, _ in self.model.named_parameters()]
        opt += [(f"adam.m.{n}", m) for n, m in zip(names, self.optimizer.m)]
        opt += [(f"adam.v.{n}", v) for n, v in zip(names, self.optimizer.v)]
        for i, st in enumerate(self.states):
            opt.append((f"carry.layer{i}.c", st.c))
            if st.h is not None:
                opt.append((f"carry.layer{i}.h", st.h))
            if st.x is not None:
                opt.append((f"carry.layer{i}.x", st.x))
        opt.append(("stream.cursors", self.stream.cursors.astype(np.float64)))
        vocab = self.vocab or CharVocab([chr(i) for i in range(self.model.vocab_size)])
        return Checkpoint(describe(self.model, vocab), [(n, p.value.copy()) for n, p in self.model.named_parameters()],
                          opt, self.step, self.rng.bit_generator.state)

    def restore(self, ckpt: Checkpoint):
        load_parameters(self.model, ckpt.params)
        opt = ckpt.optimizer_dict
        names = [n for n, _ in self.model.named_parameters()]
        try:
            self.optimizer.t = int(opt["adam.t"][0])
            self.optimizer.m = [opt[f"adam.m.{n}"].copy() for n in names]
            self.optimizer.v = [opt[f"adam.v.{n}"].copy() for n in names]
            cursors = opt["stream.cursors"].astype(np.int64)
            states = []
            for i in range(len(self.model.stack.layers)):
                h, x = opt.get(f"carry.layer{i}.h"), opt.get(f"carry.layer{i}.x")
                states.append(RecurrentState(opt[f"carry.layer{i}.c"].copy(), None if h is None else h.copy(),
                                             None if x is None else x.copy()))
        except KeyError as e:
            raise DataError(f"checkpoint lacks optimizer entry {e.args[0]!r}") from None
        if cursors.shape != self.stream.cursors.shape or states[0].c.shape[0] != self.stream.batch_size:
            raise DataError("checkpoint batch size differs from the configured stream")
        self.stream.cursors = cursors
        self.states = states
        self.step = ckpt.step
        self.rng.bit_generator.state = ckpt.rng_state

    def run(self, log_file=None, valid_ids=None, checkpoint_dir=None, eval_seq_len=100, eval_log=None):
        """Train until ``max_steps``; returns the list of logged records.

        ``log_file`` receives one tab-separated line per log interval.  With a
        ``checkpoint_dir`` the run writes ``step_<n>.dqr`` every
        ``checkpoint_interval`` steps, ``best.dqr`` at the best validation BPC
        and ``final.dqr`` at the end.
        """
        cfg = self.config
        records = []
        best, stale = float("inf"), 0
        ckdir = Path(checkpoint_dir) if checkpoint_dir else None
        while self.step < cfg.max_steps:
            rec = self.train_step()
            if rec.step % cfg.log_interval == 0:
                records.append(rec)
                if log_file is not None:
                    log_file.write(rec.to_line() + "\n")
                    log_file.flush()
            if ckdir and cfg.checkpoint_interval and rec.step % cfg.checkpoint_interval == 0:
                self.checkpoint().save(ckdir / f"step_{rec.step}.dqr")
            if valid_ids is not None and cfg.eval_interval and rec.step % cfg.eval_interval == 0:
                score = evaluate(self.model, valid_ids, eval_seq_len)
                log.info("step %d valid bpc %.4f", rec.step, score)
                if eval_log is not None:
                    eval_log.write(f"{rec.step}\t{score!r}\n")
                    eval_log.flush()
                if score < best:
                    best, stale = score, 0
                    if ckdir:
                        self.checkpoint().save(ckdir / "best.dqr")
                else:
                    stale += 1
                    if cfg.patience and stale >= cfg.patience:
                        log.info("early stop at step %d", rec.step)
                        break
        if ckdir:
            self.checkpoint().save(ckdir / "final.dqr")
        return records


def train_loop(model, stream, config: TrainConfig, vocab=None, log_file=None, valid_ids=None, checkpoint_dir=None):
    """Convenience wrapper: a fresh :class:`Trainer` run to completion."""
    trainer = Trainer(model, stream, config, vocab)
    return trainer.run(log_file, valid_ids, checkpoint_dir), trainer
