import numpy as np
import pytest

from metaua.aggregation import ServerOptState
from metaua.meta import MetaParams, RoundSnapshot, delayed_meta_loss
from metaua.model import Examples, ModelSpec
from metaua.params import ParamVector, Partition, make_layout


def central_fd(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat vector."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(a, b, floor: float = 1e-7) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|), skipping entries where both are below ``floor``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(a), np.abs(b))
    mask = scale >= floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a - b)[mask] / scale[mask]))


def random_examples(spec: ModelSpec, n: int, rng: np.random.Generator) -> Examples:
    ids = np.column_stack([rng.integers(0, c, n) for c in spec.cardinalities])
    return Examples(ids, rng.integers(0, 2, n).astype(float), np.arange(n))


def random_instance(rng, kind, n_params=None, n_clients=None, n_attrs=2, frozen=False):
    """A random small meta-gradient problem: returns (g, snapshot, theta, partition)."""
    n_params = n_params or int(rng.integers(2, 21))
    n_clients = n_clients or int(rng.integers(2, 5))
    n_cells = int(rng.integers(1, min(4, n_params) + 1))
    cuts = np.sort(rng.choice(np.arange(1, n_params), size=n_cells - 1, replace=False)) if n_cells > 1 else []
    sizes = np.diff(np.concatenate(([0], cuts, [n_params]))).astype(int)
    blocks = make_layout([(f"b{i}", (int(n),)) for i, n in enumerate(sizes)])
    partition = Partition((b.name, (b.name,)) for b in blocks)
    deltas = [ParamVector(rng.normal(0, 0.1, n_params), blocks) for _ in range(n_clients)]
    attrs = tuple(rng.normal(size=(n_cells, n_attrs)) for _ in range(n_clients))
    w_pre = ParamVector(rng.normal(size=n_params), blocks)
    zeros = w_pre.zeros_like()
    m = w_pre.with_values(rng.normal(0, 0.05, n_params)) if kind != "sgd" else zeros
    M = w_pre.with_values(rng.uniform(0.001, 0.05, n_params)) if kind != "sgd" else zeros
    opt = ServerOptState(kind, m, M, gamma_s=float(rng.uniform(0.05, 1.0)), beta1=0.9, beta2=0.99, epsilon=1e-8)
    snap = RoundSnapshot(tuple(range(n_clients)), tuple(deltas), attrs, opt, w_pre)
    theta = MetaParams(rng.normal(0, 1, n_cells), rng.normal(0, 1, (n_cells, n_attrs + 1)), frozen)
    g = ParamVector(rng.normal(size=n_params), blocks)
    return g, snap, theta, partition


def fd_meta_grad(g, snap, theta, partition, h=1e-5):
    """Finite differences of g . w_t(theta), replaying the server step."""
    n_rho = theta.rho.size

    def f(flat):
        t = MetaParams(flat[:n_rho], flat[n_rho:].reshape(theta.theta_alpha.shape))
        return delayed_meta_loss(t, g, snap, partition)

    flat = np.concatenate([theta.rho, theta.theta_alpha.ravel()])
    return central_fd(f, flat, h)


def flat_grad(grad) -> np.ndarray:
    return np.concatenate([grad.rho, grad.theta_alpha.ravel()])


@pytest.fixture
def tiny_spec():
    # 2*3 + 3*2 embeddings, cross 4x4+4, hidden 4->3, out 3->1: 52 params
    return ModelSpec((("a", 3), ("b", 3)), embed_dim=2, cross_layers=1, hidden=(3,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
