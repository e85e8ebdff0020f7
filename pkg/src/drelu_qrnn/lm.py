"""Character-level language modelling: vocabulary, batching, model and BPC."""
import math
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError
from .layers import Stack, StackConfig, init_weights

UNKNOWN = -1  # code point written to vocab files for the unknown slot


class CharVocab:
    """Code-point vocabulary, ids assigned in sorted code-point order.

    With ``unknown=True`` one extra id (the last) absorbs unseen symbols.
    """

    def __init__(self, symbols, unknown=False):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise ContractError("vocabulary symbols must be distinct")
        self.symbols = symbols
        self.unknown = unknown
        self.index = {s: i for i, s in enumerate(symbols)}
        self.unk_id = len(symbols) if unknown else None

    @classmethod
    def build(cls, text: str, unknown=False) -> "CharVocab":
        if not text:
            raise ContractError("cannot build a vocabulary from an empty corpus")
        return cls(sorted(set(text)), unknown)

    def __len__(self):
        return len(self.symbols) + (1 if self.unknown else 0)

    def __eq__(self, other):
        return isinstance(other, CharVocab) and self.symbols == other.symbols and self.unknown == other.unknown

    def encode(self, text: str) -> np.ndarray:
        if self.unknown:
            return np.fromiter((self.index.get(ch, self.unk_id) for ch in text), dtype=np.int64, count=len(text))
        try:
            return np.fromiter((self.index[ch] for ch in text), dtype=np.int64, count=len(text))
        except KeyError as e:
            raise DataError(f"symbol {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        return "".join("�" if i == self.unk_id else self.symbols[i] for i in np.asarray(ids).tolist())

    def to_text(self) -> str:
        lines = [str(ord(s)) for s in self.symbols]
        if self.unknown:
            lines.append(str(UNKNOWN))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CharVocab":
        codes = [int(line) for line in text.split("\n") if line.strip()]
        unknown = bool(codes) and codes[-1] == UNKNOWN
        if unknown:
            codes = codes[:-1]
        return cls([chr(c) for c in codes], unknown)

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="ascii")

    @classmethod
    def load(cls, path) -> "CharVocab":
        return cls.from_text(Path(path).read_text(encoding="ascii"))


def read_corpus(path, encoding="utf-8") -> str:
    try:
        return Path(path).read_text(encoding=encoding, errors="replace")
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e.strerror}") from None
    except LookupError:
        raise DataError(f"unknown encoding {encoding!r}") from None


class BatchStream:
    """Split a corpus into ``batch_size`` contiguous lanes and read them in segments.

    Lane ``b`` covers ids ``[b*L, (b+1)*L)`` with ``L = len(ids) // batch_size``;
    each call to :meth:`next_batch` returns the next ``seq_len`` positions of
    every lane, and a lane wraps to its start when fewer than ``seq_len + 1``
    positions remain.
    """

    def __init__(self, ids, batch_size, seq_len):
        ids = np.asarray(ids, dtype=np.int64)
        if batch_size < 1 or seq_len < 1:
            raise ContractError("batch_size and seq_len must be positive")
        if len(ids) < batch_size * (seq_len + 1):
            raise ContractError(f"corpus of {len(ids)} symbols is too small for "
                            f"{batch_size} lanes of {seq_len + 1}")
        self.ids = ids
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.lane_len = len(ids) // batch_size
        self.offsets = np.arange(batch_size) * self.lane_len
        self.cursors = np.zeros(batch_size, dtype=np.int64)

    def next_batch(self):
        """Returns ``(inputs, targets, wrapped)`` with arrays of shape ``[B, S]``."""
        S = self.seq_len
        wrapped = False
        over = self.cursors + S + 1 > self.lane_len
        if over.any():
            self.cursors[over] = 0
            wrapped = True
        idx = (self.offsets + self.cursors)[:, None] + np.arange(S + 1)
        chunk = self.ids[idx]
        self.cursors += S
        return chunk[:, :-1], chunk[:, 1:], wrapped

    def __iter__(self):
        while True:
            yield self.next_batch()


def bpc(nats: float) -> float:
    """Mean cross-entropy in nats to bits per character."""
    if nats < 0:
        raise ContractError(f"cross-entropy cannot be negative, got {nats}")
    return nats / math.log(2)


class LmModel:
    """Embedding, recurrent stack and softmax classifier over characters."""

    def __init__(self, vocab_size, stack_config: StackConfig, embedding_size=50, seed=None):
        rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
        self.vocab_size = vocab_size
        self.embedding_size = embedding_size
        self.config = stack_config
        cfg = stack_config
        self.embedding = T.parameter(init_weights((vocab_size, embedding_size), cfg.init, cfg.init_scale, rng),
                                     "embedding")
        self.stack = Stack(cfg, embedding_size, rng)
        self.W_out = T.parameter(init_weights((self.stack.output_size, vocab_size), cfg.init, cfg.init_scale, rng),
                                 "W_out")
        self.b_out = T.parameter(np.zeros(vocab_size), "b_out")

    def named_parameters(self):
        return ([("embedding", self.embedding)] + self.stack.named_parameters()
                + [("W_out", self.W_out), ("b_out", self.b_out)])

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    @property
    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def initial_states(self, batch):
        return self.stack.initial_states(batch)

    def forward(self, ids, states=None, training=False, rng=None):
        """Logits ``[B*S, V]`` plus the stack output record for ``ids [B, S]``."""
        ids = np.asarray(ids)
        B, S = ids.shape
        out = self.stack.forward(T.embedding(self.embedding, ids), states, training, rng)
        rows = T.reshape(out.output, (B * S, self.stack.output_size))
        return T.add_bias(T.matmul(rows, self.W_out), self.b_out), out

    def loss(self, ids, targets, states=None, training=False, rng=None):
        """Mean cross-entropy in nats and the stack output."""
        logits, out = self.forward(ids, states, training, rng)
        return T.softmax_cross_entropy(logits, np.asarray(targets).reshape(-1)), out


def evaluate(model: LmModel, ids, seq_len=100, return_total=False):
    """BPC of ``model`` over the whole id sequence in one lane, carrying state.

    Dropout is off and no tape is recorded.  Every position after the first
    is predicted exactly once; the last segment may be shorter than ``seq_len``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) < 2:
        raise DataError("need at least two symbols to evaluate")
    if ids.max() >= model.vocab_size:
        raise ContractError(f"ids reach {ids.max()} but the model has {model.vocab_size} classes")
    states = model.initial_states(1)
    total = 0.0
    for start in range(0, len(ids) - 1, seq_len):
        stop = min(start + seq_len, len(ids) - 1)
        inp = ids[start:stop][None]
        tgt = ids[start + 1:stop + 1]
        loss, out = model.loss(inp, tgt, states)
        total += float(loss.value) * len(tgt)
        states = out.states
    if return_total:
        return total
    return bpc(total / (len(ids) - 1))


_ONSETS = ["", "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w",
           "br", "ch", "cl", "cr", "dr", "fl", "gr", "pl", "pr", "sh", "sl", "st", "th", "tr", "wh"]
_VOWELS = ["a", "e", "i", "o", "u", "ea", "ee", "ai", "ou", "oo", "y"]
_CODAS = ["", "", "", "n", "r", "s", "t", "l", "d", "m", "ng", "st", "nd", "ck", "rt"]


def synthetic_corpus(n_chars: int, seed=0, n_words=1500) -> str:
    """Deterministic English-like text for tests and desk-scale runs.

    Words are built from syllables, drawn from a Zipf law, and chained with
    a sparse first-order word transition table, so the text has learnable
    structure at the character and word level.
    """
    rng = np.random.default_rng(seed)
    words = set()
    while len(words) < n_words:
        k = 1 + min(rng.poisson(0.8), 3)
        words.add("".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS) for _ in range(k)))
    # tie-break alphabetically: set order depends on the per-process string hash seed
    words = sorted(words, key=lambda w: (len(w), w))
    ranks = np.arange(1, n_words + 1)
    zipf = 1.0 / ranks
    zipf /= zipf.sum()
    cdf = np.cumsum(zipf)
    cdf[-1] = 1.0
    succ = np.searchsorted(cdf, rng.random((n_words, 8)), side="right")
    out, size, w, sentence = [], 0, 0, 0
    while size < n_chars:
        if rng.random() < 0.7:
            w = int(succ[w, rng.integers(8)])
        else:
            w = int(np.searchsorted(cdf, rng.random(), side="right"))
        token = words[w]
        if sentence == 0:
            token = token.capitalize()
        sentence += 1
        if sentence > 4 and rng.random() < 0.15:
            token += rng.choice([".", ".", ".", "?", "!"]) + ("\n" if rng.random() < 0.2 else " ")
            sentence = 0
        elif rng.random() < 0.06:
            token += ", "
        else:
            token += " "
        out.append(token)
        size += len(token)
    return "".join(out)[:n_chars]
