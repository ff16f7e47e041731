"""
Central finite-difference gradient verification.
"""
import numpy as np


FD_STEP = 1e-5
RELATIVE_FLOOR = 1e-4


def numerical_gradient(fn, array, step=FD_STEP):
    """
    Central difference gradient of the scalar fn() with respect to array, which is perturbed in place and restored.
    """
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        index = it.multi_index
        original = array[index]
        array[index] = original + step
        plus = fn()
        array[index] = original - step
        minus = fn()
        array[index] = original
        grad[index] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic, numeric, floor=RELATIVE_FLOOR):
    """
    Max elementwise |a - n| / max(|a|, |n|, floor).
    The floor keeps gradients near zero from being judged on rounding noise alone.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradient(fn, array, analytic, step=FD_STEP, floor=RELATIVE_FLOOR):
    """Return the relative error between analytic and the finite difference gradient of fn at array."""
    return relative_error(analytic, numerical_gradient(fn, array, step), floor)
