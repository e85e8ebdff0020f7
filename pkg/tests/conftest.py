import numpy as np
import pytest

from drelu_qrnn import tensor as T


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x`` (pure numpy oracle)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x.copy())
        flat[i] = old - h
        fm = f(x.copy())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-4):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def tape_grad(build, *arrays):
    """Gradients of ``build(*variables)`` w.r.t. each input array via the tape."""
    vs = [T.parameter(np.array(a, dtype=np.float64)) for a in arrays]
    with T.Tape() as tape:
        loss = build(*vs)
    tape.backward(loss)
    return [v.grad for v in vs]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
