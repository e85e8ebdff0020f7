"""Sectioned ``key = value`` run configuration with strict key checking."""
import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError, DataError
from .layers import StackConfig
from .train import TrainConfig

EXAMPLE = """\
[model]
layers = 2
hidden_size = 128
embedding_size = 50
first_width = 6
width = 2
activation = drelu
alpha = 1.0
dropout = 0.15
dense = false
cell = qrnn
init = orthogonal

[data]
train = train.txt
valid =
encoding = utf-8
batch_size = 32
seq_len = 100
eval_chars = 0

[optim]
lr = 0.0003
clip_norm = 5.0
max_steps = 1000
eval_interval = 0
checkpoint_interval = 0
seed = 0

[output]
log = train.log
checkpoint_dir = checkpoints
"""


@dataclass
class ModelSection:
    layers: int = 2
    hidden_size: str = "128"
    embedding_size: int = 50
    first_width: int = 6
    width: int = 2
    activation: str = "drelu"
    alpha: float = 1.0
    dropout: float = 0.15
    dense: bool = False
    cell: str = "qrnn"
    init: str = "orthogonal"
    init_scale: Optional[float] = None

    def stack_config(self) -> StackConfig:
        try:
            sizes = tuple(int(s) for s in str(self.hidden_size).split(","))
        except ValueError:
            raise ConfigError(f"model.hidden_size must be an integer or comma-separated integers, "
                              f"got {self.hidden_size!r}") from None
        return StackConfig(self.layers, sizes[0] if len(sizes) == 1 else sizes, self.first_width, self.width,
                           self.activation, self.alpha, self.dropout, self.dense, self.cell, self.init,
                           self.init_scale)


@dataclass
class DataSection:
    train: str = ""
    valid: str = ""
    encoding: str = "utf-8"
    batch_size: int = 32
    seq_len: int = 100
    eval_chars: int = 0


@dataclass
class OptimSection:
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


@dataclass
class OutputSection:
    log: str = "train.log"
    checkpoint_dir: str = "checkpoints"
    log_timing: bool = True


SECTIONS = {"model": ModelSection, "data": DataSection, "optim": OptimSection, "output": OutputSection}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    optim: OptimSection = field(default_factory=OptimSection)
    output: OutputSection = field(default_factory=OutputSection)
    source: Optional[str] = field(default=None, compare=False)

    def train_config(self) -> TrainConfig:
        o = self.optim
        return TrainConfig(o.lr, o.beta1, o.beta2, o.eps, o.clip_norm, o.max_steps, o.log_interval,
                           o.eval_interval, o.checkpoint_interval, o.patience, o.seed, self.output.log_timing)

    def with_seed(self, seed):
        return replace(self, optim=replace(self.optim, seed=seed))

    def to_text(self) -> str:
        out = []
        for sec in SECTIONS:
            out.append(f"[{sec}]")
            for f in fields(SECTIONS[sec]):
                v = getattr(getattr(self, sec), f.name)
                if v is None:
                    continue
                if isinstance(v, bool):
                    v = "true" if v else "false"
                elif isinstance(v, float):
                    v = repr(v)
                out.append(f"{f.name} = {v}")
            out.append("")
        return "\n".join(out)

    def validate_paths(self):
        """Fail before any training step if an input file is missing."""
        if not self.data.train:
            raise ConfigError("data.train is required")
        for key in ("train", "valid"):
            p = getattr(self.data, key)
            if p and not Path(p).is_file():
                raise DataError(f"data.{key}: corpus file not found: {p}")


def _line_of(text, section, key):
    cur = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            cur = m.group(1).strip()
        elif cur == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return n
    return None


def _convert(text, section, key, raw, typ):
    where = f"{section}.{key}"
    line = _line_of(text, section, key)
    if line:
        where += f" (line {line})"
    try:
        if typ is bool or typ == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw.lower() == "true"
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float", Optional[float], "Optional[float]"):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value {raw!r} for {where}: {e}") from None


def parse_config(text: str, source=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    sections = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            line = next(n for n, ln in enumerate(text.splitlines(), 1) if ln.strip() == f"[{sec}]")
            raise ConfigError(f"unknown section [{sec}] (line {line})")
        known = {f.name: f.type for f in fields(SECTIONS[sec])}
        kw = {}
        for key, raw in parser.items(sec):
            if key not in known:
                raise ConfigError(f"unknown key {sec}.{key} (line {_line_of(text, sec, key)})")
            kw[key] = _convert(text, sec, key, raw.strip(), known[key])
        try:
            sections[sec] = SECTIONS[sec](**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None
    cfg = RunConfig(**sections, source=source)
    cfg.model.stack_config()  # validates architecture fields
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path))
