import math
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drelu_qrnn.cli import main
from drelu_qrnn.config import EXAMPLE, RunConfig, parse_config
from drelu_qrnn.errors import ConfigError
from drelu_qrnn.layers import StackConfig
from drelu_qrnn.lm import CharVocab, LmModel, synthetic_corpus
from drelu_qrnn.train import Checkpoint, StepRecord, describe


def write_config(tmp_path, corpus_chars=50_000, steps=100, **over):
    corpus = tmp_path / "train.txt"
    if not corpus.exists():
        corpus.write_text(synthetic_corpus(corpus_chars, seed=1))
    values = {
        "model": dict(layers=2, hidden_size=16, embedding_size=8, activation="drelu", dropout=0.1),
        "data": dict(train=corpus, batch_size=8, seq_len=32),
        "optim": dict(lr=0.003, max_steps=steps, seed=0, checkpoint_interval=0),
        "output": dict(log=tmp_path / "train.log", checkpoint_dir=tmp_path / "ckpt", log_timing="false"),
    }
    for key, v in over.items():
        sec, _, name = key.partition("__")
        values[sec][name] = v
    text = "".join(f"[{sec}]\n" + "".join(f"{k} = {v}\n" for k, v in kv.items()) + "\n" for sec, kv in values.items())
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


class TestConfig:
    def test_example_parses(self):
        cfg = parse_config(EXAMPLE)
        assert cfg.model.stack_config() == StackConfig(layers=2, hidden_size=128, dropout=0.15)
        assert cfg.optim.lr == 3e-4 and cfg.data.seq_len == 100

    def test_unknown_key_names_key_and_line(self):
        with pytest.raises(ConfigError, match=r"model\.hiden_size.*line 3"):
            parse_config("[model]\nlayers = 2\nhiden_size = 4\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match=r"\[modle\].*line 1"):
            parse_config("[modle]\nlayers = 2\n")

    def test_bad_value_names_line(self):
        with pytest.raises(ConfigError, match=r"optim\.lr \(line 5\)"):
            parse_config("[model]\nlayers = 2\n\n[optim]\nlr = fast\n")

    def test_bad_bool(self):
        with pytest.raises(ConfigError, match="dense"):
            parse_config("[model]\ndense = yes\n")

    def test_invalid_architecture(self):
        with pytest.raises(ConfigError):
            parse_config("[model]\nactivation = swish\n")
        with pytest.raises(ConfigError):
            parse_config("[model]\nhidden_size = 12,x\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError):
            parse_config("[model]\nlayers = 2\nlayers = 3\n")

    def test_round_trip(self):
        cfg = parse_config(EXAMPLE)
        assert parse_config(cfg.to_text()) == cfg

    @settings(max_examples=30)
    @given(st.integers(1, 8), st.sampled_from(["tanh", "relu", "elu", "drelu", "delu"]), st.floats(0, 0.9),
           st.floats(1e-6, 1.0), st.integers(0, 2**31), st.booleans())
    def test_round_trip_property(self, layers, act, p, lr, seed, dense):
        text = (f"[model]\nlayers = {layers}\nactivation = {act}\ndropout = {p!r}\ndense = {str(dense).lower()}\n"
                f"[optim]\nlr = {lr!r}\nseed = {seed}\n")
        cfg = parse_config(text)
        assert parse_config(cfg.to_text()) == cfg

    def test_with_seed(self):
        assert RunConfig().with_seed(9).optim.seed == 9


class TestTrainCommand:
    def test_missing_corpus_names_path(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        text = cfg.read_text().replace(str(tmp_path / "train.txt"), str(tmp_path / "absent.txt"))
        cfg.write_text(text)
        assert main(["train", "--config", str(cfg)]) == 3
        assert "absent.txt" in capsys.readouterr().err

    def test_malformed_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[model]\nlayers = 2\nwidht = 3\n")
        assert main(["train", "--config", str(cfg)]) == 2
        err = capsys.readouterr().err
        assert "widht" in err and "line 3" in err

    def test_config_required(self):
        assert main(["train"]) == 2

    def test_zero_steps_writes_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path, steps=0)
        assert main(["train", "--config", str(cfg)]) == 0
        assert Checkpoint.load(tmp_path / "ckpt" / "final.dqr").step == 0

    def test_smoke_run(self, tmp_path):
        cfg = write_config(tmp_path, steps=100)
        assert main(["train", "--config", str(cfg)]) == 0
        lines = (tmp_path / "train.log").read_text().splitlines()
        recs = [StepRecord.from_line(ln) for ln in lines]
        assert [r.step for r in recs] == list(range(1, 101))
        assert all(math.isfinite(r.nats) and r.bpc == pytest.approx(r.nats / math.log(2)) for r in recs)

    def test_print_effective_config_round_trips(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["train", "--config", str(cfg), "--seed", "7", "--print-effective-config"]) == 0
        echoed = parse_config(capsys.readouterr().out)
        assert echoed.optim.seed == 7
        again = tmp_path / "echo.ini"
        again.write_text(echoed.to_text())
        assert main(["train", "--config", str(again), "--print-effective-config"]) == 0
        assert parse_config(capsys.readouterr().out) == echoed

    def test_resume(self, tmp_path):
        cfg = write_config(tmp_path, steps=10, optim__checkpoint_interval=5)
        assert main(["train", "--config", str(cfg)]) == 0
        full = (tmp_path / "train.log").read_text().splitlines()
        out = tmp_path / "resumed.log"
        out.write_text("\n".join(full[:5]) + "\n")
        assert main(["train", "--config", str(cfg), "--resume", str(tmp_path / "ckpt" / "step_5.dqr"),
                     "--out", str(out)]) == 0
        assert out.read_text().splitlines() == full

    def test_resume_mismatch(self, tmp_path):
        cfg = write_config(tmp_path, steps=0)
        assert main(["train", "--config", str(cfg)]) == 0
        other = write_config(tmp_path, steps=5, model__hidden_size=20)
        assert main(["train", "--config", str(other), "--resume", str(tmp_path / "ckpt" / "final.dqr")]) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_abort_exit_code(self, tmp_path, capsys):
        cfg = write_config(tmp_path, steps=5, optim__lr=1e300, optim__clip_norm=1e300, model__init="normal",
                           model__init_scale=1e100)
        assert main(["train", "--config", str(cfg)]) == 4
        assert "step 1" in capsys.readouterr().err


@pytest.fixture
def zero_output_checkpoint(tmp_path):
    text = synthetic_corpus(3000, seed=4)
    vocab = CharVocab.build(text, unknown=True)
    model = LmModel(len(vocab), StackConfig(layers=2, hidden_size=8), 6, seed=0)
    model.W_out.value[:] = 0.0
    path = tmp_path / "zero.dqr"
    Checkpoint(describe(model, vocab), [(n, p.value) for n, p in model.named_parameters()]).save(path)
    corpus = tmp_path / "held.txt"
    corpus.write_text(text)
    return path, corpus, len(vocab)


class TestAnalysisCommands:
    def test_eval_uniform(self, zero_output_checkpoint, tmp_path, capsys):
        ckpt, corpus, V = zero_output_checkpoint
        out = tmp_path / "eval.tsv"
        assert main(["eval", "--checkpoint", str(ckpt), "--corpus", str(corpus), "--out", str(out)]) == 0
        header, row = out.read_text().splitlines()
        assert header.split("\t") == ["corpus", "chars", "vocab", "bpc"]
        assert float(row.split("\t")[3]) == pytest.approx(math.log2(V), abs=1e-6)
        assert f"{math.log2(V):.6f}" in capsys.readouterr().out

    def test_stats(self, zero_output_checkpoint, tmp_path):
        ckpt, corpus, _ = zero_output_checkpoint
        out = tmp_path / "stats.tsv"
        assert main(["stats", "--checkpoint", str(ckpt), "--corpus", str(corpus), "--tau", "0.05",
                     "--out", str(out)]) == 0
        rows = [ln.split("\t") for ln in out.read_text().splitlines()[1:]]
        assert len(rows) == 2
        for r in rows:
            assert sum(float(x.rstrip("%")) for x in r[1:4]) == pytest.approx(100.0, abs=1e-3)

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "x.dqr"), "--corpus", str(tmp_path / "y")]) == 3

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--points", "2"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_gradcheck_from_config(self, tmp_path, capsys):
        cfg = write_config(tmp_path, model__activation="delu", model__alpha=0.1)
        assert main(["gradcheck", "--points", "2", "--config", str(cfg)]) == 0
        assert "qrnn[delu(alpha=0.1)]" in capsys.readouterr().out

    def test_gradcheck_failure_exit(self):
        assert main(["gradcheck", "--points", "1", "--tol", "0"]) == 4

    def test_demo_explode_tanh_bounded(self, tmp_path):
        out = tmp_path / "demo.tsv"
        assert main(["demo-explode", "--activation", "tanh", "--rho", "2.0", "--dim", "16", "--out", str(out)]) == 0
        rows = [ln.split("\t") for ln in out.read_text().splitlines()[1:]]
        assert len(rows) == 101
        assert max(float(r[1]) for r in rows[1:]) <= math.sqrt(16)
        assert max(float(r[2]) for r in rows[1:]) <= 1.0

    def test_demo_explode_deterministic(self, capsys):
        main(["demo-explode", "--seed", "3", "--steps", "20"])
        a = capsys.readouterr().out
        main(["demo-explode", "--seed", "3", "--steps", "20"])
        assert capsys.readouterr().out == a
        assert float(re.search(r"final/initial = (\S+)", a).group(1)) == pytest.approx(1.1 ** 20, rel=1e-5)

    def test_bench(self, tmp_path):
        out = tmp_path / "bench.tsv"
        assert main(["bench", "--hidden", "16", "--batch", "2", "--seq-len", "10", "--repeats", "2",
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("model\t") and len(lines) == 3

    def test_bad_activation_is_config_error(self):
        assert main(["demo-explode", "--activation", "swish"]) == 2
