"""Point-set rendering of chains and entropic optimal transport matching.

All computation here is double precision regardless of network precision.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .camera import ImagePolyline

DEFAULT_EPS = 0.01
DEFAULT_MAX_ITERS = 500
DEFAULT_TOL = 1e-6

_GRAD_NORM_FLOOR = 1e-12  # skip gradient terms for coincident point pairs


@dataclass(frozen=True)
class TransportPlan:
    gamma: np.ndarray        # (M, N), non-negative
    row_marginal: np.ndarray  # (M,)
    col_marginal: np.ndarray  # (N,)
    epsilon: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class EmdResult:
    value: float         # transport cost sum(gamma * C)
    reg_value: float     # value + eps * KL(gamma | uniform product); grad_q is its exact gradient
    grad_q: np.ndarray   # (N, 2), d value / d Q with the plan held fixed
    plan: TransportPlan


def sample_chain_points(polyline: ImagePolyline, n: int) -> np.ndarray:
    """n points at uniform arc-length spacing along the polyline, shape (n, 2)."""
    if n < 2:
        raise ValueError(f"need at least 2 sample points, got {n}")
    pts = np.asarray(polyline.points, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("empty polyline")
    if len(pts) == 1:
        return np.repeat(pts, n, axis=0)
    seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = seg_len.sum()
    if total == 0.0:
        return np.repeat(pts[:1], n, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    t = np.linspace(0.0, total, n)
    idx = np.clip(np.searchsorted(cum, t, side="right") - 1, 0, len(seg_len) - 1)
    local = (t - cum[idx]) / np.where(seg_len[idx] > 0, seg_len[idx], 1.0)
    return pts[idx] + local[:, None] * (pts[idx + 1] - pts[idx])


def cost_matrix(P, Q) -> np.ndarray:
    """Pairwise Euclidean distances, shape (M, N)."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if len(P) == 0 or len(Q) == 0:
        raise ValueError("point sets must be non-empty")
    diff = P[:, None, :] - Q[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def sinkhorn(C, eps=DEFAULT_EPS, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL) -> TransportPlan:
    """Log-domain Sinkhorn-Knopp with uniform marginals 1/M, 1/N."""
    C = np.asarray(C, dtype=np.float64)
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix contains non-finite entries")
    if eps <= 0:
        raise ValueError(f"regularization must be positive, got {eps}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    M, N = C.shape
    log_a = np.full(M, -np.log(M))
    log_b = np.full(N, -np.log(N))
    f = np.zeros(M)
    g = np.zeros(N)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        f = eps * log_a - eps * _logsumexp((g[None, :] - C) / eps, axis=1)
        g = eps * log_b - eps * _logsumexp((f[:, None] - C) / eps, axis=0)
        if it % 10 == 0 or it == max_iters:
            gamma = np.exp((f[:, None] + g[None, :] - C) / eps)
            err = max(np.abs(gamma.sum(axis=1) - np.exp(log_a)).max(),
                      np.abs(gamma.sum(axis=0) - np.exp(log_b)).max())
            if err < tol:
                converged = True
                break
    gamma = np.exp((f[:, None] + g[None, :] - C) / eps)
    return TransportPlan(gamma=gamma, row_marginal=np.exp(log_a),
                         col_marginal=np.exp(log_b), epsilon=eps,
                         iterations=it, converged=converged)


def sinkhorn_batch(C, eps=DEFAULT_EPS, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL):
    """Batched log-domain Sinkhorn over C of shape (B, M, N); returns (gamma, iters)."""
    C = np.asarray(C, dtype=np.float64)
    B, M, N = C.shape
    log_a = -np.log(M)
    log_b = -np.log(N)
    f = np.zeros((B, M))
    g = np.zeros((B, N))
    it = 0
    for it in range(1, max_iters + 1):
        f = eps * log_a - eps * _logsumexp((g[:, None, :] - C) / eps, axis=2)
        g = eps * log_b - eps * _logsumexp((f[:, :, None] - C) / eps, axis=1)
        if it % 10 == 0:
            gamma = np.exp((f[:, :, None] + g[:, None, :] - C) / eps)
            err = max(np.abs(gamma.sum(axis=2) - np.exp(log_a)).max(),
                      np.abs(gamma.sum(axis=1) - np.exp(log_b)).max())
            if err < tol:
                break
    gamma = np.exp((f[:, :, None] + g[:, None, :] - C) / eps)
    return gamma, it


def _envelope_grad(P, Q, gamma):
    diff = Q[:, None, :] - P[None, :, :]            # (N, M, 2)
    norm = np.linalg.norm(diff, axis=-1)
    safe = np.where(norm > _GRAD_NORM_FLOOR, norm, 1.0)
    unit = np.where((norm > _GRAD_NORM_FLOOR)[..., None], diff / safe[..., None], 0.0)
    return np.einsum("mn,nm...->n...", gamma, unit)


def _kl_uniform(gamma, M, N):
    ab = 1.0 / (M * N)
    g = gamma
    return float(np.sum(np.where(g > 0, g * np.log(g / ab), 0.0)) - g.sum() + 1.0)


def emd(P, Q, eps=DEFAULT_EPS, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL) -> EmdResult:
    """Entropic EMD value and envelope gradient with respect to Q.

    The envelope gradient (plan held fixed) is the exact derivative of the
    regularized objective `reg_value`; it is only first-order-in-eps exact
    for the bare transport cost `value`.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    C = cost_matrix(P, Q)
    plan = sinkhorn(C, eps=eps, max_iters=max_iters, tol=tol)
    value = float(np.sum(plan.gamma * C))
    reg = value + eps * _kl_uniform(plan.gamma, *C.shape)
    return EmdResult(value=value, reg_value=reg,
                     grad_q=_envelope_grad(P, Q, plan.gamma), plan=plan)


def emd_batch(P, Q, eps=DEFAULT_EPS, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL):
    """Batched EMD: P (B,M,2), Q (B,N,2) -> (values (B,), grads (B,N,2))."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    diff = P[:, :, None, :] - Q[:, None, :, :]      # (B, M, N, 2)
    C = np.sqrt(np.sum(diff * diff, axis=-1))
    gamma, _ = sinkhorn_batch(C, eps=eps, max_iters=max_iters, tol=tol)
    values = np.sum(gamma * C, axis=(1, 2))
    norm = np.where(C > _GRAD_NORM_FLOOR, C, 1.0)
    unit = np.where((C > _GRAD_NORM_FLOOR)[..., None], -diff / norm[..., None], 0.0)
    grads = np.einsum("bmn,bmn...->bn...", gamma, unit)
    return values, grads


def exact_emd_oracle(P, Q) -> float:
    """Exhaustive minimum of (1/M) sum_i |p_i - q_sigma(i)| over permutations."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    M, N = len(P), len(Q)
    if M != N:
        raise ValueError(f"oracle needs M == N, got {M} and {N}")
    if M > 8:
        raise ValueError(f"oracle limited to M <= 8, got {M}")
    C = cost_matrix(P, Q)
    best = np.inf
    for perm in itertools.permutations(range(N)):
        best = min(best, C[np.arange(M), perm].sum())
    return best / M
