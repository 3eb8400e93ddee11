import numpy as np


def central_difference(f, x: np.ndarray, eps: float = 1e-4, coords=None) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (perturbs ``x`` in place, restores it)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def random_lattice(rng, T: int, V: int, scale: float = 2.0) -> np.ndarray:
    x = rng.normal(size=(T, V + 1)) * scale
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


# one line per acceptance criterion, printed at the end of the session by conftest.py
ACCEPTANCE: dict[int, str] = {}
