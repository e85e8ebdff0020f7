"""Central finite-difference checks of tape gradients.

A coordinate is skipped when perturbing it by ``+-h`` flips the sign pattern
of any rectifier input recorded on the tape, since the one-sided slopes then
differ and the difference quotient is meaningless.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .activations import KINKED_KINDS, ActivationKind, delu, drelu, elu, relu, sigmoid, tanh
from .layers import LstmCell, QrnnLayer, Stack, StackConfig


def relative_error(analytic, numeric, floor=1e-4):
    """``|a - n| / max(|a|, |n|, floor)``; the floor makes tiny gradients absolute."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class CheckResult:
    name: str
    checked: int
    skipped: int
    max_error: float
    tol: float

    @property
    def passed(self):
        return self.checked > 0 and self.max_error <= self.tol

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}\t{self.name}\tchecked={self.checked}\tskipped={self.skipped}\tmax_rel_err={self.max_error:.3e}"


def _signature(tape):
    return [tuple(s > 0 for s in rec.saved) for rec in tape.records if rec.kind in KINKED_KINDS]


def _same(sig_a, sig_b):
    return len(sig_a) == len(sig_b) and all(
        all(np.array_equal(x, y) for x, y in zip(a, b)) for a, b in zip(sig_a, sig_b))


def _run(loss_fn):
    with T.Tape() as tape:
        loss = loss_fn()
    return loss, tape


def compare(loss_fn, variables, h=1e-5, rng=None, max_coords=None):
    """Yield ``(analytic, numeric)`` pairs, or ``None`` for kink-crossing coordinates.

    ``loss_fn`` builds a scalar loss from ``variables`` inside a fresh tape.
    """
    for v in variables:
        v.grad = None
    loss, tape = _run(loss_fn)
    tape.backward(loss)
    analytic = [v.grad.copy() if v.grad is not None else np.zeros(v.shape) for v in variables]
    base = _signature(tape)
    coords = [(k, i) for k, v in enumerate(variables) for i in range(v.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = [coords[j] for j in rng.choice(len(coords), max_coords, replace=False)]
    for k, i in coords:
        flat = variables[k].value.reshape(-1)
        old = flat[i]
        flat[i] = old + h
        lp, tp = _run(loss_fn)
        sig_p = _signature(tp)
        flat[i] = old - h
        lm, tm = _run(loss_fn)
        sig_m = _signature(tm)
        flat[i] = old
        if not (_same(base, sig_p) and _same(base, sig_m)):
            yield None
            continue
        yield analytic[k].reshape(-1)[i], (float(lp.value) - float(lm.value)) / (2 * h)
    for v in variables:
        v.grad = None


def check(name, loss_fn, variables, h=1e-5, tol=1e-5, rng=None, max_coords=None) -> CheckResult:
    checked = skipped = 0
    worst = 0.0
    for pair in compare(loss_fn, variables, h, rng, max_coords):
        if pair is None:
            skipped += 1
            continue
        checked += 1
        worst = max(worst, relative_error(*pair))
    return CheckResult(name, checked, skipped, worst, tol)


def merge(name, results, tol):
    return CheckResult(name, sum(r.checked for r in results), sum(r.skipped for r in results),
                       max((r.max_error for r in results), default=0.0), tol)


def _away_from_kinks(rng, shape, margin=1e-4, scale=2.0):
    x = rng.uniform(-scale, scale, size=shape)
    while (bad := np.abs(x) < margin).any():
        x[bad] = rng.uniform(-scale, scale, size=int(bad.sum()))
    return x


def _activation_checks(points, h, tol, rng, alpha):
    single = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "elu": lambda x: elu(x, alpha)}
    out = []
    for name, fn in single.items():
        res = []
        for _ in range(points):
            x = T.parameter(_away_from_kinks(rng, (6,)))
            w = rng.normal(size=6)
            res.append(check(name, lambda: T.sum_(fn(x) * w), [x], h, tol))
        out.append(merge(name, res, tol))
    for name, fn in {"drelu": drelu, "delu": lambda a, b: delu(a, b, alpha)}.items():
        res = []
        for _ in range(points):
            a = T.parameter(_away_from_kinks(rng, (6,)))
            b = T.parameter(_away_from_kinks(rng, (6,)))
            w = rng.normal(size=6)
            res.append(check(name, lambda: T.sum_(fn(a, b) * w), [a, b], h, tol))
        out.append(merge(name, res, tol))
    return out


def _readout_loss(out, rng, V=5):
    B, L, H = out.shape
    W = rng.normal(size=(H, V))
    targets = rng.integers(0, V, B * L)
    return lambda y: T.softmax_cross_entropy(T.matmul(T.reshape(y, (B * L, H)), W), targets)


def gradcheck_suite(activation="drelu", alpha=1.0, layers=2, dense=False, points=20, h=1e-5, tol=1e-5,
                    hidden=4, seed=0, max_coords=40):
    """Finite-difference checks over activations, layers and the loss.

    Each check draws ``points`` independent random parameter/input sets and
    compares up to ``max_coords`` coordinates per set.
    """
    rng = np.random.default_rng(seed)
    results = _activation_checks(points, h, tol, rng, alpha)
    B, L, d = 2, 5, 3

    def layer_check(name, make):
        res = []
        for _ in range(points):
            layer = make()
            x = T.parameter(rng.normal(size=(B, L, d)))
            params = layer.parameters() + [x]
            for p in layer.parameters():
                p.value = rng.normal(0.0, 0.5, size=p.shape)
            probe, _, _ = layer.forward(x)
            readout = _readout_loss(probe, rng)
            state = layer.initial_state(B)
            state.c = rng.normal(size=state.c.shape)
            if state.h is not None:
                state.h = rng.normal(size=state.h.shape)
            res.append(check(name, lambda: readout(layer.forward(x, state)[0]), params, h, tol, rng, max_coords))
        return merge(name, res, tol)

    kind = ActivationKind.parse(activation, alpha)
    results.append(layer_check(f"qrnn[{kind}]", lambda: QrnnLayer(d, hidden, 2, kind, seed=rng)))
    if kind.tag != "tanh":
        results.append(layer_check("qrnn[tanh]", lambda: QrnnLayer(d, hidden, 2, ActivationKind("tanh"), seed=rng)))
    results.append(layer_check("lstm", lambda: LstmCell(d, hidden, seed=rng)))

    res = []
    cfg = StackConfig(layers=max(layers, 2), hidden_size=hidden, first_width=3, width=2,
                      activation=kind.tag, alpha=alpha, dense=True)
    for _ in range(points):
        stack = Stack(cfg, d, rng)
        for p in stack.parameters():
            p.value = rng.normal(0.0, 0.5, size=p.shape)
        x = T.parameter(rng.normal(size=(B, L, d)))
        readout = _readout_loss(stack.forward(x).output, rng)
        res.append(check("dense-stack", lambda: readout(stack.forward(x).output),
                         stack.parameters() + [x], h, tol, rng, max_coords))
    results.append(merge(f"dense-stack[{layers if layers >= 2 else 2}x{kind}]", res, tol))
    if not dense and layers >= 2:
        res = []
        cfg = StackConfig(layers=layers, hidden_size=hidden, first_width=3, width=2,
                          activation=kind.tag, alpha=alpha)
        for _ in range(points):
            stack = Stack(cfg, d, rng)
            for p in stack.parameters():
                p.value = rng.normal(0.0, 0.5, size=p.shape)
            x = T.parameter(rng.normal(size=(B, L, d)))
            readout = _readout_loss(stack.forward(x).output, rng)
            res.append(check("stack", lambda: readout(stack.forward(x).output),
                             stack.parameters() + [x], h, tol, rng, max_coords))
        results.append(merge(f"stack[{layers}x{kind}]", res, tol))

    res = []
    for _ in range(points):
        logits = T.parameter(rng.normal(size=(4, 7)))
        targets = rng.integers(0, 7, 4)
        res.append(check("xent", lambda: T.softmax_cross_entropy(logits, targets), [logits], h, tol))
    results.append(merge("softmax-xent", res, tol))
    return results
