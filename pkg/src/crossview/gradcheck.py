"""Finite-difference verification of analytic gradients.

The objective is re-evaluated 2x per parameter entry with central
differences, so keep the models tiny (this is a float64 verification
path, not a training path).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import NonFiniteError, Parameter, no_grad


def grad_check(f: Callable[[], "Tensor"], params: Sequence[Parameter],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must rebuild the scalar objective from the current parameter
    values on every call. The error for one entry is
    ``|g_a - g_fd| / max(1, |g_a|, |g_fd|)``; the max over all entries of
    all ``params`` is returned.
    """
    params = list(params)
    if any(p.dtype != np.float64 for p in params):
        raise ValueError("grad_check requires float64 parameters")

    for p in params:
        p.zero_grad()
    try:
        loss = f()
    except NonFiniteError as e:
        raise NonFiniteError(f"objective evaluation: {e}") from e
    loss.backward()
    analytic = {}
    for p in params:
        analytic[id(p)] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    worst = 0.0
    for p in params:
        ga = analytic[id(p)]
        flat = p.data.reshape(-1)
        gaf = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + eps
                with no_grad():
                    f_plus = float(f().data)
                flat[i] = orig - eps
                with no_grad():
                    f_minus = float(f().data)
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"non-finite intermediate at {p.name or 'param'}[{i}]: {e}"
                ) from e
            finally:
                flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1.0, abs(gaf[i]), abs(g_fd))
            err = abs(gaf[i] - g_fd) / denom
            if err > worst:
                worst = err
    return worst
