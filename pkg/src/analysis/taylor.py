"""Second-order forgetting bound: loss increase vs. 1/2 lambda_max ||theta - theta*||^2.

lambda_max comes from power iteration on finite-difference Hessian-vector
products. The dense Hessian appears only in the Newton refinement of the
readout objective's minimizer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from src.data.synthetic import TaskDataset
from src.lora.model import WeightPair
from src.shared.errors import ConvergenceError, ShapeError

LOGGER = logging.getLogger(__name__)

LossFn = Callable[[np.ndarray], float]
GradFn = Callable[[np.ndarray], np.ndarray]

BOUND_SLACK = 1e-3


@dataclass(frozen=True)
class TaylorCheck:
    delta_loss: float
    bound: float
    holds: bool
    lambda_max: float
    distance: float


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def power_iteration(
    matvec: Callable[[np.ndarray], np.ndarray],
    dim: int,
    v0: Optional[np.ndarray] = None,
    max_iter: int = 1000,
    rtol: float = 1e-6,
    seed: int = 0,
) -> float:
    """Dominant (largest-magnitude) eigenvalue of a symmetric operator via Rayleigh quotients."""
    v = np.random.default_rng(seed).normal(size=dim) if v0 is None else np.asarray(v0, dtype=np.float64)
    v = _normalize(v)
    eigval = np.inf
    for step in range(max_iter):
        w = matvec(v)
        new_eigval = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(new_eigval - eigval) <= rtol * max(abs(new_eigval), 1e-12):
            LOGGER.debug("power iteration converged after %d steps: %.6g", step + 1, new_eigval)
            return new_eigval
        eigval = new_eigval
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps (last estimate {eigval:.6g})")


def finite_difference_grad(loss: LossFn, step: float = 1e-5) -> GradFn:
    def gradient(theta: np.ndarray) -> np.ndarray:
        out = np.empty_like(theta, dtype=np.float64)
        for idx in range(theta.size):
            bump = np.zeros_like(theta, dtype=np.float64)
            bump.flat[idx] = step
            out.flat[idx] = (loss(theta + bump) - loss(theta - bump)) / (2.0 * step)
        return out

    return gradient


def hessian_vector_product(grad: GradFn, theta: np.ndarray, step: float = 1e-4) -> Callable[[np.ndarray], np.ndarray]:
    def hvp(v: np.ndarray) -> np.ndarray:
        return (grad(theta + step * v) - grad(theta - step * v)) / (2.0 * step)

    return hvp


def estimate_lambda_max(
    loss: LossFn,
    theta: np.ndarray,
    grad: Optional[GradFn] = None,
    step: float = 1e-4,
    rtol: float = 1e-6,
    max_iter: int = 1000,
    seed: int = 0,
) -> float:
    """Algebraically largest Hessian eigenvalue at ``theta``.

    If power iteration lands on a negative eigenvalue mu, the shifted operator
    H - mu I is iterated instead and mu added back.
    """
    theta = np.asarray(theta, dtype=np.float64)
    hvp = hessian_vector_product(grad or finite_difference_grad(loss), theta, step)
    dominant = power_iteration(hvp, theta.size, max_iter=max_iter, rtol=rtol, seed=seed)
    if dominant >= 0:
        return dominant
    shifted = power_iteration(lambda v: hvp(v) - dominant * v, theta.size, max_iter=max_iter, rtol=rtol, seed=seed + 1)
    return shifted + dominant


def taylor_bound_check(
    loss: LossFn,
    theta_star: np.ndarray,
    theta: np.ndarray,
    grad: Optional[GradFn] = None,
    lambda_max: Optional[float] = None,
    slack: float = BOUND_SLACK,
) -> TaylorCheck:
    theta_star = np.asarray(theta_star, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != theta_star.shape:
        raise ShapeError("taylor_bound_check", theta.shape, theta_star.shape)
    if lambda_max is None:
        lambda_max = estimate_lambda_max(loss, theta_star, grad)
    distance = float(np.linalg.norm(theta - theta_star))
    delta_loss = float(loss(theta) - loss(theta_star))
    bound = 0.5 * lambda_max * distance**2
    return TaylorCheck(
        delta_loss=delta_loss,
        bound=bound,
        holds=delta_loss <= bound * (1.0 + slack),
        lambda_max=lambda_max,
        distance=distance,
    )


@dataclass(frozen=True)
class ReadoutObjective:
    """Convex float64 loss over the output layer with hidden features held fixed."""

    features: np.ndarray  # n x (h + 1), trailing ones column for the bias
    labels: np.ndarray
    n_classes: int
    ridge: float
    theta_star: np.ndarray

    def loss(self, theta: np.ndarray) -> float:
        logp = self._log_probs(theta)
        nll = -logp[np.arange(self.labels.size), self.labels].mean()
        return float(nll + 0.5 * self.ridge * np.dot(theta, theta))

    def grad(self, theta: np.ndarray) -> np.ndarray:
        probs = np.exp(self._log_probs(theta))
        probs[np.arange(self.labels.size), self.labels] -= 1.0
        g = self.features.T @ probs / self.labels.size
        return g.reshape(-1) + self.ridge * theta

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        probs = np.exp(self._log_probs(theta))
        n, width = self.features.shape
        outer = np.einsum("nc,ne->nce", probs, probs)
        soft = np.einsum("nc,ce->nce", probs, np.eye(self.n_classes)) - outer
        h = np.einsum("na,nb,nce->acbe", self.features, self.features, soft, optimize=True) / n
        dim = width * self.n_classes
        return h.reshape(dim, dim) + self.ridge * np.eye(dim)

    def _log_probs(self, theta: np.ndarray) -> np.ndarray:
        logits = self.features @ theta.reshape(self.features.shape[1], self.n_classes)
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def hidden_features(weights: Sequence[WeightPair], x: np.ndarray) -> np.ndarray:
    h = x.astype(np.float64)
    for w, b in weights[:-1]:
        h = np.tanh(h @ w.data.astype(np.float64) + b.data.astype(np.float64))
    return np.hstack([h, np.ones((h.shape[0], 1))])


def readout_objective(
    weights: Sequence[WeightPair],
    dataset: TaskDataset,
    ridge: float = 1e-2,
    grad_tol: float = 1e-9,
    max_iter: int = 50,
) -> ReadoutObjective:
    """Build the objective and refine its minimizer with damped Newton steps until ||grad|| < ``grad_tol``."""
    features = hidden_features(weights, dataset.x_train)
    w_out, b_out = weights[-1]
    start = np.vstack([w_out.data, b_out.data]).astype(np.float64).reshape(-1)
    objective = ReadoutObjective(features, dataset.y_train.astype(np.int64), w_out.cols, ridge, start)
    theta = start
    for it in range(max_iter):
        g = objective.grad(theta)
        if np.linalg.norm(g) < grad_tol:
            LOGGER.debug("readout objective converged after %d Newton steps", it)
            return ReadoutObjective(features, objective.labels, objective.n_classes, ridge, theta)
        direction = np.linalg.solve(objective.hessian(theta), g)
        current, t = objective.loss(theta), 1.0
        # full steps once inside the quadratic region
        while np.linalg.norm(g) > 1e-4 and t > 1e-10 and objective.loss(theta - t * direction) > current - 1e-4 * t * float(g @ direction):
            t *= 0.5
        theta = theta - t * direction
    raise ConvergenceError(f"readout objective gradient still {np.linalg.norm(objective.grad(theta)):.3g} after {max_iter} steps")


def perturbation_study(
    objective: ReadoutObjective,
    n_directions: int = 100,
    radius: float = 1e-2,
    seed: int = 0,
) -> List[TaylorCheck]:
    """Bound checks along random directions with ||theta - theta*|| <= ``radius``."""
    lam = estimate_lambda_max(objective.loss, objective.theta_star, grad=objective.grad)
    rng = np.random.default_rng(seed)
    checks = []
    for _ in range(n_directions):
        direction = _normalize(rng.normal(size=objective.theta_star.size))
        length = radius * rng.uniform(0.1, 1.0)
        checks.append(
            taylor_bound_check(objective.loss, objective.theta_star, objective.theta_star + length * direction, lambda_max=lam)
        )
    return checks


__all__ = [
    "BOUND_SLACK",
    "ReadoutObjective",
    "TaylorCheck",
    "estimate_lambda_max",
    "finite_difference_grad",
    "hessian_vector_product",
    "hidden_features",
    "perturbation_study",
    "power_iteration",
    "readout_objective",
    "taylor_bound_check",
]
