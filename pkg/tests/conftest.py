import numpy as np
import pytest

from brainage.autodiff import Tape, Tensor


def numeric_gradient(loss_fn, tensor: Tensor, coords, step: float = 1e-5) -> dict:
    """Central finite differences of loss_fn() w.r.t. selected coordinates."""
    grads = {}
    flat = tensor.data.reshape(-1)
    for c in coords:
        original = flat[c]
        flat[c] = original + step
        up = loss_fn().item()
        flat[c] = original - step
        down = loss_fn().item()
        flat[c] = original
        grads[c] = (up - down) / (2.0 * step)
    return grads


def coord_sample(tensor: Tensor, rng, max_coords: int = 12) -> np.ndarray:
    n = tensor.data.size
    if n <= max_coords:
        return np.arange(n)
    return rng.choice(n, size=max_coords, replace=False)


def assert_grads_match(loss_fn, params: dict, rng=None, rel_tol: float = 1e-4,
                       abs_floor: float = 1e-6, max_coords: int = 12, step: float = 1e-5):
    """Check reverse-mode grads of loss_fn against finite differences.

    Every parameter tensor is probed; large tensors are probed at a seeded
    random coordinate subset. loss_fn must rebuild the forward pass.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    for name, p in params.items():
        coords = coord_sample(p, rng, max_coords)
        numeric = numeric_gradient(loss_fn, p, coords, step=step)
        for c in coords:
            a = analytic[name].reshape(-1)[c]
            n = numeric[c]
            err = abs(a - n)
            assert err <= max(abs_floor, rel_tol * max(abs(a), abs(n))), (
                f"gradient mismatch for {name}[{c}]: analytic {a!r}, numeric {n!r}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
