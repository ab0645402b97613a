"""Parameter Stability loss, total-loss composition and the orthogonality term."""
from __future__ import annotations

from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.nn.tape import Matrix, add, frob_norm_sq, matmul, mean_all, mul, scale, sub, tanh_map
from src.shared.errors import ShapeError

PSReduction = Literal["elementwise", "global"]
PSTerms = Literal["both", "magnitude", "sign"]
StabilityPreset = Literal["standard", "desk"]

STANDARD_LAMBDA = 0.001
LONG_SEQUENCE_LAMBDA = 0.1
# mean-reduced over a few hundred entries, STANDARD_LAMBDA is lost to float32
# rounding next to the cross-entropy gradient of the desk-scale perceptron
DESK_LAMBDA = 1000.0


def default_lambda(n_tasks: int, preset: StabilityPreset = "standard") -> float:
    """Stability weight when none is given: by sequence length, or the desk calibration."""
    if preset == "desk":
        return DESK_LAMBDA
    return STANDARD_LAMBDA if n_tasks <= 4 else LONG_SEQUENCE_LAMBDA


class RegularizerConfig(BaseModel):
    """Weights of the stability and orthogonality terms.

    ``lam`` is serialised as ``lambda``.
    """

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    lam: float = Field(default=STANDARD_LAMBDA, ge=0, alias="lambda")
    alpha: float = Field(default=10.0, gt=0)
    apply_from_task: int = Field(default=2, ge=1)
    orth_mu: float = Field(default=0.0, ge=0)
    ps_reduction: PSReduction = "elementwise"
    ps_terms: PSTerms = "both"


def ps_loss(
    delta_t: Matrix,
    cum_prev: Matrix,
    alpha: float,
    reduction: PSReduction = "elementwise",
    terms: PSTerms = "both",
) -> Matrix:
    """Stability penalty of the new update against the accumulated history.

    Element-wise: mean of w^2 * (1 - tanh(a w) tanh(a p)). ``cum_prev`` is a
    constant; only ``delta_t`` is differentiated.
    """
    if delta_t.shape != cum_prev.shape:
        raise ShapeError("ps_loss", delta_t.shape, cum_prev.shape)
    history_sign = Matrix(np.tanh(alpha * cum_prev.data.astype(np.float64)))
    alignment = sub(Matrix.ones(*delta_t.shape), mul(tanh_map(scale(delta_t, alpha)), history_sign))
    if reduction == "global":
        if terms == "magnitude":
            return frob_norm_sq(delta_t)
        if terms == "sign":
            return mean_all(alignment)
        return mul(frob_norm_sq(delta_t), mean_all(alignment))
    squared = mul(delta_t, delta_t)
    if terms == "magnitude":
        return mean_all(squared)
    if terms == "sign":
        return mean_all(alignment)
    return mean_all(mul(squared, alignment))


def orth_loss(active_A: Matrix, prev_As: Sequence[Matrix]) -> Matrix:
    """Sum over previous tasks of ||A_i^T A_t||_F^2."""
    total: Optional[Matrix] = None
    for prev in prev_As:
        if prev.rows != active_A.rows:
            raise ShapeError("orth_loss", prev.shape, active_A.shape, detail="A matrices must share d")
        term = frob_norm_sq(matmul(Matrix(prev.data.T), active_A))
        total = term if total is None else add(total, term)
    return total if total is not None else Matrix.zeros(1, 1)


def total_loss(
    l_f: Matrix,
    ps_terms: Sequence[Matrix],
    cfg: RegularizerConfig,
    task_index: int,
    orth_term: Optional[Matrix] = None,
) -> Matrix:
    """L = L_f + lambda * sum(L_s) from ``apply_from_task`` on, plus mu * orth when enabled."""
    loss = l_f
    if cfg.lam > 0 and task_index >= cfg.apply_from_task and ps_terms:
        stability = ps_terms[0]
        for term in ps_terms[1:]:
            stability = add(stability, term)
        loss = add(loss, scale(stability, cfg.lam))
    if orth_term is not None and cfg.orth_mu > 0:
        loss = add(loss, scale(orth_term, cfg.orth_mu))
    return loss


__all__ = [
    "DESK_LAMBDA",
    "LONG_SEQUENCE_LAMBDA",
    "PSReduction",
    "PSTerms",
    "RegularizerConfig",
    "STANDARD_LAMBDA",
    "StabilityPreset",
    "default_lambda",
    "orth_loss",
    "ps_loss",
    "total_loss",
]
