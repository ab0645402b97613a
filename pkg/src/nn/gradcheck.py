"""Central finite-difference check of tape gradients."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from src.nn.tape import Matrix, Tape, grad, no_grad, storage_dtype

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradCheckResult:
    analytic: List[np.ndarray]
    numeric: List[np.ndarray]
    max_abs_error: float
    max_rel_error: float
    passed: bool


def check_gradients(
    fn: Callable[..., Matrix],
    arrays: Sequence[np.ndarray],
    step: float = 1e-3,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> GradCheckResult:
    """Compare reverse-mode adjoints of a scalar ``fn`` with central differences.

    ``fn`` receives one Matrix per entry of ``arrays``. Everything runs under
    float64 storage; an entry passes when ``|a - n| <= atol + rtol * max(|a|, |n|)``.
    """
    with storage_dtype(np.float64):
        leaves = [Matrix(a) for a in arrays]
        with Tape() as tape:
            tape.watch(*leaves)
            out = fn(*leaves)
        grads = grad(tape, out)
        analytic = [grads[leaf].numpy() for leaf in leaves]

        numeric: List[np.ndarray] = []
        base = [np.array(leaf.data) for leaf in leaves]
        with no_grad():
            for idx, values in enumerate(base):
                estimate = np.zeros_like(values)
                for pos in np.ndindex(values.shape):
                    shifted = list(base)
                    plus = values.copy()
                    plus[pos] += step
                    minus = values.copy()
                    minus[pos] -= step
                    shifted[idx] = plus
                    f_plus = fn(*[Matrix(b) for b in shifted]).item()
                    shifted[idx] = minus
                    f_minus = fn(*[Matrix(b) for b in shifted]).item()
                    estimate[pos] = (f_plus - f_minus) / (2.0 * step)
                numeric.append(estimate)

    max_abs = 0.0
    max_rel = 0.0
    passed = True
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        passed = passed and bool(np.all(diff <= atol + rtol * scale))
        max_abs = max(max_abs, float(diff.max(initial=0.0)))
        rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
        max_rel = max(max_rel, float(rel.max(initial=0.0)))
    LOGGER.debug("gradient check: max abs %.3e, max rel %.3e", max_abs, max_rel)
    return GradCheckResult(analytic, numeric, max_abs, max_rel, passed)


__all__ = ["GradCheckResult", "check_gradients"]
