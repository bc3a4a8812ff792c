"""
Per-event two-class Crammer-Singer SVM on support embeddings, solved in the
dual and differentiated implicitly through its KKT system.

For event k with signs s_i = +1 (positive) / -1 (negative) and v = w1 - w0,
the primal is
    min 1/4 |v|^2 + lam * sum_i xi_i   s.t.  s_i v.x_i >= 1 - xi_i, xi_i >= 0
(at the optimum w1 = v/2 = -w0). With Z = diag(s) X and H = 2 Z Z^T the dual is
    min 1/2 a^T H a - 1^T a   s.t.  0 <= a <= lam,     v = 2 Z^T a.
Decision values for a query x are v.x; metaopt probabilities are sigmoid(v.x).
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
import torch
from torch.autograd import Function

from services.exceptions import (
    DegenerateInput, IllConditionedKkt, InvalidConfig, NoNegativeSupport, NoPositiveSupport, ShapeMismatch,
    SolverFailure,
)

logger = logging.getLogger(__name__)

MAX_ITER = 1000
WARM_START_ITER = 50
KKT_TOL = 1e-6
KKT_JITTER = 1e-8
MAX_CONDITION = 1e12
# eigenvalues of the free block below this fraction of the largest are treated as zero
EIGEN_CUTOFF = 1e-12


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def kkt_residual(alpha: np.ndarray, gram: np.ndarray, lam: float) -> float:
    """inf-norm of the projected-gradient fixed-point residual"""
    gradient = gram @ alpha - 1.0
    return float(np.max(np.abs(alpha - np.clip(alpha - gradient, 0.0, lam)))) if alpha.size else 0.0


def _warm_start(gram: np.ndarray, lam: float, iterations: int) -> np.ndarray:
    """Accelerated projected gradient with adaptive restart"""
    lipschitz = max(float(np.linalg.eigvalsh(gram)[-1]), 1e-12)
    alpha = np.zeros(gram.shape[0])
    momentum = alpha.copy()
    t = 1.0
    for _ in range(iterations):
        gradient = gram @ momentum - 1.0
        updated = np.clip(momentum - gradient / lipschitz, 0.0, lam)
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        if np.dot(momentum - updated, updated - alpha) > 0:
            t_next = 1.0
            momentum = updated.copy()
        else:
            momentum = updated + ((t - 1.0) / t_next) * (updated - alpha)
        alpha, t = updated, t_next
    return alpha


def _free_direction(block: np.ndarray, gradient: np.ndarray, null_tol: float) -> Tuple[np.ndarray, bool]:
    """(direction, is_newton) for the free variables

    The Newton step solves the block system on its range. When the gradient
    has a component along the block's null space the objective falls linearly
    there, and that component is returned instead.
    """
    curvatures, basis = np.linalg.eigh(block)
    keep = curvatures > EIGEN_CUTOFF * max(float(np.max(np.abs(curvatures))), 1.0)
    coords = basis.T @ gradient
    along_null = basis[:, ~keep] @ coords[~keep]
    if along_null.size and float(np.max(np.abs(along_null))) > null_tol:
        return -along_null, False
    return -(basis[:, keep] @ (coords[keep] / curvatures[keep])), True


def solve_box_qp(gram: np.ndarray, lam: float, max_iter: int = MAX_ITER,
                 tol: float = KKT_TOL) -> Tuple[np.ndarray, float, int]:
    """min 1/2 a^T gram a - 1^T a over [0, lam]^n

    A short accelerated projected-gradient run picks the starting point. A
    primal active-set method then holds variables exactly at 0 or lam, takes
    Newton steps on the free block (stopping at the first bound hit), and
    releases the bound with the most violated multiplier once the free block
    is stationary. Returns (alpha, kkt residual, iterations).
    """
    n = gram.shape[0]
    if n == 0:
        return np.zeros(0), 0.0, 0
    warm = min(WARM_START_ITER, max_iter)
    alpha = _warm_start(gram, lam, warm)
    lower = alpha <= 0.0
    upper = alpha >= lam
    alpha[lower] = 0.0
    alpha[upper] = lam

    stationary_tol = 1e-3 * tol
    release_tol = 0.5 * tol
    settled = False
    for iteration in range(1, max_iter + 1):
        gradient = gram @ alpha - 1.0
        free = np.flatnonzero(~(lower | upper))
        free_gradient = gradient[free]
        worst_free = float(np.max(np.abs(free_gradient))) if free.size else 0.0

        if worst_free > stationary_tol and not (settled and worst_free <= release_tol):
            block = gram[np.ix_(free, free)]
            direction, newton = _free_direction(block, free_gradient, stationary_tol)
            slope = float(free_gradient @ direction)
            curvature = float(direction @ block @ direction)
            exact = max(-slope / curvature, 0.0) if curvature > 0.0 else np.inf
            with np.errstate(divide="ignore", invalid="ignore"):
                room = np.where(direction < 0.0, alpha[free] / -direction,
                                np.where(direction > 0.0, (lam - alpha[free]) / direction, np.inf))
            blocking = int(np.argmin(room))
            step = min(exact, float(room[blocking]))
            if not np.isfinite(step):
                raise SolverFailure("SVM dual has no bounded step along a free direction")
            alpha[free] = np.clip(alpha[free] + step * direction, 0.0, lam)
            blocked = room[blocking] <= exact
            if blocked:
                index = free[blocking]
                if direction[blocking] < 0.0:
                    alpha[index], lower[index] = 0.0, True
                else:
                    alpha[index], upper[index] = lam, True
            settled = newton and not blocked
            continue

        violation = np.where(lower, -gradient, 0.0) + np.where(upper, gradient, 0.0)
        worst = int(np.argmax(violation))
        if violation[worst] <= release_tol:
            return alpha, kkt_residual(alpha, gram, lam), warm + iteration
        lower[worst] = upper[worst] = False
        settled = False

    residual = kkt_residual(alpha, gram, lam)
    if residual <= tol:
        return alpha, residual, warm + max_iter
    raise SolverFailure(f"SVM dual did not reach KKT residual {tol:g} in {max_iter} iterations "
                        f"(residual {residual:.3e})")


@dataclass
class SvmDuals:
    """Solution of the per-event SVMs for one support set"""
    alpha: np.ndarray          # [K, n_support]
    signs: np.ndarray          # [K, n_support], +1 / -1
    lam: float
    weights: np.ndarray        # [K, dim], v_k = w1_k - w0_k
    kkt_residual: np.ndarray   # [K]
    iterations: List[int] = field(default_factory=list)

    @property
    def positive_weights(self) -> np.ndarray:
        return self.weights / 2.0

    @property
    def negative_weights(self) -> np.ndarray:
        return -self.weights / 2.0

    def decision(self, query_embedding) -> np.ndarray:
        """[n_query, K] decision differences (w1 - w0).x"""
        return _as_array(query_embedding) @ self.weights.T

    def slack(self, support_embedding) -> np.ndarray:
        margins = self.signs * (_as_array(support_embedding) @ self.weights.T).T
        return np.maximum(0.0, 1.0 - margins)

    def primal_objective(self, support_embedding) -> np.ndarray:
        return 0.25 * np.sum(self.weights ** 2, axis=1) + self.lam * self.slack(support_embedding).sum(axis=1)

    def dual_objective(self) -> np.ndarray:
        return self.alpha.sum(axis=1) - 0.25 * np.sum(self.weights ** 2, axis=1)


def svm_fit(support_embedding, support_y, lam: float, max_iter: int = MAX_ITER,
            tol: float = KKT_TOL) -> SvmDuals:
    """Fit one SVM per label column of support_y ([n_support, K], 1 = positive)"""
    x = _as_array(support_embedding)
    y = _as_array(support_y)
    if y.ndim == 1:
        y = y[:, None]
    if lam <= 0:
        raise InvalidConfig("lambda must be > 0")
    if x.ndim != 2 or x.shape[0] == 0:
        raise DegenerateInput("SVM needs a non-empty support set")
    if y.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"{y.shape[0]} labels for {x.shape[0]} support embeddings")

    signs = np.where(y > 0.5, 1.0, -1.0).T
    alphas, weights, residuals, iterations = [], [], [], []
    for k in range(signs.shape[0]):
        if not np.any(signs[k] > 0):
            raise NoPositiveSupport(k)
        if not np.any(signs[k] < 0):
            raise NoNegativeSupport(k)
        z = signs[k][:, None] * x
        alpha, residual, used = solve_box_qp(2.0 * z @ z.T, lam, max_iter, tol)
        alphas.append(alpha)
        weights.append(2.0 * z.T @ alpha)
        residuals.append(residual)
        iterations.append(used)
    logger.debug(f"SVM fit: {len(alphas)} events, iterations {iterations}, max residual {max(residuals):.2e}")
    return SvmDuals(alpha=np.stack(alphas), signs=signs, lam=float(lam), weights=np.stack(weights),
                    kkt_residual=np.asarray(residuals), iterations=iterations)


@dataclass
class SvmGradients:
    support: np.ndarray   # [n_support, dim]
    query: np.ndarray     # [n_query, dim]
    lam: float


def svm_backward(duals: SvmDuals, support_embedding, query_embedding, upstream,
                 jitter: float = KKT_JITTER) -> SvmGradients:
    """Gradients of L(decision values) wrt support embeddings, query embeddings and lambda

    The support gradient differentiates the equality KKT system on the free
    set at the returned solution; bound duals move only with lambda.
    """
    x = _as_array(support_embedding)
    xq = _as_array(query_embedding)
    g = _as_array(upstream)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape != (xq.shape[0], duals.weights.shape[0]):
        raise ShapeMismatch(f"upstream gradient {g.shape} vs decisions {(xq.shape[0], duals.weights.shape[0])}")

    lam = duals.lam
    eps = 1e-12 * max(1.0, lam)
    grad_support = np.zeros_like(x)
    grad_query = g @ duals.weights
    grad_lam = 0.0

    for k in range(duals.weights.shape[0]):
        alpha, s = duals.alpha[k], duals.signs[k]
        z = s[:, None] * x
        gv = xq.T @ g[:, k]
        grad_z = 2.0 * np.outer(alpha, gv)
        grad_alpha = 2.0 * z @ gv

        upper = alpha >= lam - eps
        free = ~upper & (alpha > eps)
        u = np.zeros_like(alpha)
        if free.any():
            gram = 2.0 * z @ z.T
            block = gram[np.ix_(free, free)]
            if np.linalg.cond(block) > MAX_CONDITION:
                warnings.warn(f"KKT block for event {k} is ill-conditioned; adding jitter {jitter:g}",
                              IllConditionedKkt, stacklevel=2)
                block = block + jitter * np.eye(block.shape[0])
            u[free] = np.linalg.solve(block, grad_alpha[free])
            grad_lam -= float(u[free] @ gram[np.ix_(free, upper)].sum(axis=1))
            m = -np.outer(u, alpha)
            grad_z += 2.0 * (m + m.T) @ z
        grad_lam += float(grad_alpha[upper].sum())
        grad_support += s[:, None] * grad_z

    return SvmGradients(support=grad_support, query=grad_query, lam=grad_lam)


class SvmDecision(Function):
    """decisions[q, k] = (w1_k - w0_k).f(x_q) with the SVM solved on the support embeddings"""

    @staticmethod
    def forward(ctx, support_embedding, query_embedding, support_y, lam, max_iter, tol, jitter):
        duals = svm_fit(support_embedding, support_y, lam, max_iter, tol)
        ctx.duals = duals
        ctx.jitter = jitter
        ctx.save_for_backward(support_embedding, query_embedding)
        decisions = duals.decision(query_embedding)
        return torch.as_tensor(decisions, dtype=query_embedding.dtype, device=query_embedding.device)

    @staticmethod
    def backward(ctx, grad):
        support_embedding, query_embedding = ctx.saved_tensors
        grads = svm_backward(ctx.duals, support_embedding, query_embedding, grad, ctx.jitter)
        as_support = torch.as_tensor(grads.support, dtype=support_embedding.dtype, device=support_embedding.device)
        as_query = torch.as_tensor(grads.query, dtype=query_embedding.dtype, device=query_embedding.device)
        return as_support, as_query, None, None, None, None, None


def svm_decision(support_embedding: torch.Tensor, query_embedding: torch.Tensor, support_y: torch.Tensor,
                 lam: float, max_iter: int = MAX_ITER, tol: float = KKT_TOL,
                 jitter: float = KKT_JITTER) -> torch.Tensor:
    return SvmDecision.apply(support_embedding, query_embedding, support_y, lam, max_iter, tol, jitter)
