import numpy as np
import pytest

from polypsynth import tensor as T


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(1.0, np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / denom)


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Finite-difference gradient of scalar f at x, element by element."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
    return grad


def gradcheck(build_loss, x0: np.ndarray, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare analytic grad of build_loss(Tensor)->scalar against central FD.

    ``build_loss`` must be a pure function of its input tensor (any other
    randomness fixed outside). Returns the relative error.
    """
    xt = T.tensor(x0, np.float64, requires_grad=True)
    loss = build_loss(xt)
    analytic = T.backward(loss, xt).numpy()

    def scalar(xv):
        return build_loss(T.tensor(xv, np.float64)).item()

    numeric = central_diff(scalar, x0, h)
    err = rel_err(analytic, numeric)
    assert err < tol, f"gradcheck failed: rel err {err:.3g} >= {tol}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
