"""Command-line entry point: ``drelu-qrnn <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (non-finite loss or failed gradient check).
"""
import argparse
import logging
import sys
from contextlib import ExitStack
from pathlib import Path

import numpy as np

from . import analysis
from .config import load_config
from .errors import ConfigError, ContractError, DataError, NumericalError
from .gradcheck import gradcheck_suite
from .layers import StackConfig
from .lm import BatchStream, CharVocab, LmModel, evaluate, read_corpus
from .train import Checkpoint, Trainer, describe, model_from_checkpoint

log = logging.getLogger("drelu_qrnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _emit(args, header, rows):
    """Print a table and, with ``--out``, write the same rows tab-separated."""
    print(analysis.format_table(header, rows))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write("\t".join(header) + "\n")
            for r in rows:
                fh.write("\t".join(str(c) for c in r) + "\n")


def _load_model(path):
    ckpt = Checkpoint.load(path)
    return model_from_checkpoint(ckpt)


def _encode_heldout(vocab, text):
    if not vocab.unknown:
        missing = set(text) - set(vocab.symbols)
        if missing:
            raise DataError(f"corpus has {len(missing)} symbols outside the checkpoint vocabulary")
    return vocab.encode(text)


def cmd_train(args):
    if not args.config:
        raise ConfigError("train needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.print_effective_config:
        sys.stdout.write(cfg.to_text())
        return EXIT_OK
    cfg.validate_paths()
    text = read_corpus(cfg.data.train, cfg.data.encoding)
    vocab = CharVocab.build(text, unknown=True)
    stack = cfg.model.stack_config()
    model = LmModel(len(vocab), stack, cfg.model.embedding_size, seed=cfg.optim.seed)
    stream = BatchStream(vocab.encode(text), cfg.data.batch_size, cfg.data.seq_len)
    trainer = Trainer(model, stream, cfg.train_config(), vocab)
    if args.resume:
        ckpt = Checkpoint.load(args.resume)
        if ckpt.descriptor != describe(model, vocab):
            raise DataError(f"checkpoint {args.resume} does not match the configured architecture or vocabulary")
        trainer.restore(ckpt)
    valid = None
    if cfg.data.valid:
        vtext = read_corpus(cfg.data.valid, cfg.data.encoding)
        if cfg.data.eval_chars:
            vtext = vtext[:cfg.data.eval_chars]
        valid = vocab.encode(vtext)
    log_path = Path(args.out or cfg.output.log)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if args.resume else "w"
    with ExitStack() as stack_ctx:
        log_file = stack_ctx.enter_context(open(log_path, mode))
        eval_log = stack_ctx.enter_context(open(str(log_path) + ".eval", mode)) if valid is not None else None
        records = trainer.run(log_file, valid, cfg.output.checkpoint_dir, cfg.data.seq_len, eval_log)
    if records:
        log.info("finished at step %d, last train bpc %.4f", trainer.step, records[-1].bpc)
    return EXIT_OK


def cmd_eval(args):
    model, vocab = _load_model(args.checkpoint)
    ids = _encode_heldout(vocab, read_corpus(args.corpus, args.encoding))
    score = evaluate(model, ids, args.seq_len)
    _emit(args, ["corpus", "chars", "vocab", "bpc"], [[args.corpus, len(ids), len(vocab), f"{score:.6f}"]])
    return EXIT_OK


def cmd_stats(args):
    model, vocab = _load_model(args.checkpoint)
    ids = _encode_heldout(vocab, read_corpus(args.corpus, args.encoding))
    stats = analysis.cell_state_stats(model, ids, args.tau, args.seq_len)
    rows = [[i, f"{s.near_zero:.4%}", f"{s.negative:.4%}", f"{s.positive:.4%}", s.tau, s.count]
            for i, s in enumerate(stats)]
    _emit(args, ["layer", "near_zero", "negative", "positive", "tau", "count"], rows)
    return EXIT_OK


def cmd_bench(args):
    subject = StackConfig(layers=args.layers, hidden_size=args.hidden, first_width=args.width, width=args.width,
                          activation=args.activation, cell="qrnn")
    if args.baseline == "lstm":
        baseline = StackConfig(layers=args.layers, hidden_size=args.hidden, cell="lstm")
    else:
        baseline = subject
    reports = analysis.throughput_bench(subject, baseline, None, args.batch, args.seq_len, args.repeats,
                                        args.warmup, args.seed or 0)
    header = analysis.ThroughputReport.header().split("\t")
    _emit(args, header, [r.to_line().split("\t") for r in reports])
    return EXIT_OK


def cmd_gradcheck(args):
    activation, alpha, layers, dense = args.activation, 1.0, 2, False
    if args.config:
        m = load_config(args.config).model
        activation, alpha, layers, dense = m.activation, m.alpha, m.layers, m.dense
    results = gradcheck_suite(activation, alpha, layers, dense, args.points, args.h, args.tol,
                              seed=args.seed or 0)
    for r in results:
        print(r.line())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(r.line() for r in results) + "\n")
    if all(r.passed for r in results):
        return EXIT_OK
    raise NumericalError("gradient check failed: " + ", ".join(r.name for r in results if not r.passed))


def cmd_demo_explode(args):
    norms, hs = analysis.exploding_state_demo(args.activation, args.rho, args.steps, args.dim,
                                              args.seed or 0, args.basis)
    peak = np.concatenate([[np.nan], np.abs(hs).max(axis=1)])
    rows = [[t, f"{n:.6g}", "" if t == 0 else f"{p:.6g}"] for t, (n, p) in enumerate(zip(norms, peak))]
    _emit(args, ["t", "l2_norm", "max_abs"], rows)
    print(f"# final/initial = {norms[-1] / norms[0]:.6g}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--seed", type=int, help="override the random seed")
    common.add_argument("--out", help="output path (training log, or tab-separated records)")

    p = argparse.ArgumentParser(prog="drelu-qrnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a character language model")
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.add_argument("--print-effective-config", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "bits per character on a corpus"),
                                 ("stats", cmd_stats, "cell-state activation statistics")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--corpus", required=True)
        e.add_argument("--encoding", default="utf-8")
        e.add_argument("--seq-len", type=int, default=100)
        if name == "stats":
            e.add_argument("--tau", type=float, default=0.1)
        e.set_defaults(func=func)

    b = sub.add_parser("bench", parents=[common], help="QRNN vs baseline throughput")
    b.add_argument("--hidden", type=int, default=256)
    b.add_argument("--batch", type=int, default=32)
    b.add_argument("--seq-len", type=int, default=100)
    b.add_argument("--layers", type=int, default=1)
    b.add_argument("--width", type=int, default=2)
    b.add_argument("--activation", default="drelu")
    b.add_argument("--baseline", choices=("lstm", "qrnn"), default="lstm")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--warmup", type=int, default=3)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--points", type=int, default=20)
    g.add_argument("--activation", default="drelu")
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("demo-explode", parents=[common], help="simple-RNN state norm trajectory")
    d.add_argument("--activation", default="relu")
    d.add_argument("--rho", type=float, default=1.1)
    d.add_argument("--steps", type=int, default=100)
    d.add_argument("--dim", type=int, default=32)
    d.add_argument("--basis", choices=("permutation", "haar"), default="permutation")
    d.set_defaults(func=cmd_demo_explode)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
