import numpy as np
import pytest


def numerical_grad(f, arr, h=1e-5):
    """Central differences of the scalar ``f()`` wrt every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-7):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = dict(d_model=8, n_experts=2, n_heads=2, ff_dim=16)


def model_gradient_errors(model, X, y, h=1e-5):
    """Max relative error per parameter tensor: backward of mean CE vs central differences."""
    from moegrpo.trainers import cross_entropy

    model.zero_grad()
    cross_entropy(model.forward(X), y).backward()
    errors = {}
    for name, p in model.params.items():
        analytic = p.grad.copy()

        def f():
            return cross_entropy(model.forward(X, params=model.snapshot()), y).item()

        errors[name] = max_rel_error(analytic, numerical_grad(f, p.data, h))
    return errors


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
