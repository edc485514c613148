"""Independent numerical oracles shared by the test modules.

Everything here deliberately avoids the package's own computation
paths: gradients come from central finite differences, reductions from
plain Python loops, so agreement with the library is two independent
routes meeting, not one route checked against itself.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from resdiag.autodiff import Tensor


def numeric_gradients(
    f: Callable[[], float], params: Sequence[Tensor], h: float = 1e-5
) -> list[np.ndarray]:
    """Central finite differences of the scalar ``f()`` w.r.t. each parameter.

    ``f`` must recompute the forward pass from current parameter values on
    every call and return a plain float.
    """
    grads = []
    for p in params:
        flat = p.value.ravel()
        g = np.zeros(flat.size)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = f()
            flat[i] = original - h
            f_minus = f()
            flat[i] = original
            g[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g.reshape(p.value.shape))
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the numeric gradient's magnitude."""
    denom = np.abs(numeric).max() + 1e-8
    return float(np.abs(analytic - numeric).max() / denom)


def check_gradients(
    loss_fn: Callable[[], "object"],
    params: Sequence[Tensor],
    tol: float = 1e-6,
    h: float = 1e-5,
) -> None:
    """Assert analytic gradients match central differences for all params.

    ``loss_fn`` builds the forward pass with package ops and returns the
    scalar output tensor; it is re-run under a fresh tape for the analytic
    side and value-only for the finite differences.
    """
    from resdiag.autodiff import Tape

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [np.array(p.grad, copy=True) if p.grad is not None else np.zeros_like(p.value) for p in params]
    for p in params:
        p.zero_grad()

    numeric = numeric_gradients(lambda: loss_fn().item(), params, h=h)
    for p, a, n in zip(params, analytic, numeric):
        err = relative_error(a, n)
        assert err < tol, f"gradient mismatch for param shape {p.shape}: rel err {err:.3e}"


def pairwise_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """O(n^2) AUC: fraction of (pos, neg) pairs ranked correctly, ties count half."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))
