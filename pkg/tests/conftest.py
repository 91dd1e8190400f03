import numpy as np
import pytest

from emsrdpn.network import NetworkConfig
from emsrdpn.tensor import GradientTape, Tensor, backward, parameter


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return NetworkConfig(D=1, C=1, G_r=2, G_d=2, G=2, scales=(2,))


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``arr`` (modified in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_op_gradients(op, arrays: list[np.ndarray], seed: int = 0, eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and finite differences of
    ``sum(op(*inputs) * probe)`` for a fixed random probe."""
    probe_holder = {}

    def value():
        ts = [Tensor(a, dtype=np.float64) for a in arrays]
        out = op(*ts)
        if "p" not in probe_holder:
            probe_holder["p"] = np.random.default_rng(seed).standard_normal(out.shape)
        return float(np.sum(out.data * probe_holder["p"]))

    value()
    ts = [parameter(a.astype(np.float64), f"in{i}") for i, a in enumerate(arrays)]
    with GradientTape() as tape:
        out = op(*ts)
        probe = Tensor(probe_holder["p"], dtype=np.float64)
        from emsrdpn.tensor import record_custom

        loss = Tensor.wrap(np.asarray(np.sum(out.data * probe.data)).reshape(1, 1, 1, 1))
        record_custom("probe", [out], loss, lambda g: [g[0].reshape(()) * probe.data])
    grads = backward(tape, loss)
    worst = 0.0
    for i, a in enumerate(arrays):
        num = numeric_grad(value, a, eps)
        worst = max(worst, rel_err(grads[f"in{i}"], num))
    return worst


ACCEPTANCE_LINES: list[str] = []


def record_criterion(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
