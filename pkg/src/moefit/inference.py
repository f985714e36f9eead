"""Score vectors, sandwich covariance, and delta-method mean intervals.

Per-observation scores are analytic.  The bread (average per-row Hessian) is
obtained by central finite differences of the analytic total score, which
keeps the meat exact while avoiding hand-derived Hessians for four expert
families.  Parameter ordering everywhere follows the serialized layout:
gating blocks 1..g-1, then expert blocks 1..g.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .model import (
    Dataset,
    MoeParams,
    add_intercept,
    check_compatible,
    gate_log_probs,
    responsibilities,
)
from .tasks import predict_mean

HESSIAN_FD_STEP = 1e-5


class InferenceError(RuntimeError):
    pass


def param_labels(theta: MoeParams) -> list[str]:
    """Names of the free parameters in serialization order."""
    labels = []
    for z in range(theta.g - 1):
        labels += [f"gate[{z + 1}].a{j}" for j in range(theta.p + 1)]
    d1 = theta.expert_width + 1
    for z in range(theta.g):
        if theta.family == "multinomial":
            for l in range(theta.K - 1):
                labels += [f"expert[{z + 1}].class[{l + 1}].b{j}" for j in range(d1)]
        else:
            labels += [f"expert[{z + 1}].b{j}" for j in range(d1)]
            if theta.family == "gaussian":
                labels += [f"expert[{z + 1}].sigma2"]
    return labels


def flatten_params(theta: MoeParams) -> np.ndarray:
    """Free parameters as one vector in serialization order."""
    parts = [theta.gating[z] for z in range(theta.g - 1)]
    for z in range(theta.g):
        if theta.family == "multinomial":
            parts.append(theta.beta[z, : theta.K - 1].ravel())
        else:
            parts.append(theta.beta[z])
            if theta.family == "gaussian":
                parts.append(np.array([theta.sigma2[z]]))
    return np.concatenate(parts) if parts else np.empty(0)


def unflatten_params(theta: MoeParams, vec: np.ndarray) -> MoeParams:
    """Rebuild a MoeParams with the same shape as ``theta`` from ``vec``."""
    vec = np.asarray(vec, dtype=float)
    out = theta.copy()
    pos = 0
    p1 = theta.p + 1
    for z in range(theta.g - 1):
        out.gating[z] = vec[pos:pos + p1]
        pos += p1
    d1 = theta.expert_width + 1
    for z in range(theta.g):
        if theta.family == "multinomial":
            m = (theta.K - 1) * d1
            out.beta[z, : theta.K - 1] = vec[pos:pos + m].reshape(theta.K - 1, d1)
            out.beta[z, theta.K - 1] = 0.0
            pos += m
        else:
            out.beta[z] = vec[pos:pos + d1]
            pos += d1
            if theta.family == "gaussian":
                out.sigma2[z] = vec[pos]
                pos += 1
    if pos != vec.size:
        raise InferenceError("parameter vector length mismatch")
    return out


def score_matrix(data: Dataset, theta: MoeParams) -> np.ndarray:
    """Analytic per-row gradients of the mixture log density, shape (n, dim)."""
    check_compatible(data, theta)
    n = data.n
    tau = responsibilities(data, theta)
    gates = np.exp(gate_log_probs(data.X, theta.gating))
    Xt = add_intercept(data.X)
    Dt = add_intercept(theta.design.matrix(data.X))
    y = data.y
    cols = []
    for z in range(theta.g - 1):
        cols.append((tau[:, z] - gates[:, z])[:, None] * Xt)
    for z in range(theta.g):
        t = tau[:, z]
        if theta.family == "gaussian":
            mu = Dt @ theta.beta[z]
            s2 = theta.sigma2[z]
            resid = y - mu
            cols.append((t * resid / s2)[:, None] * Dt)
            cols.append((t * (resid ** 2 / (2.0 * s2 ** 2) - 0.5 / s2))[:, None])
        elif theta.family == "logistic":
            pi = 1.0 / (1.0 + np.exp(-(Dt @ theta.beta[z])))
            cols.append((t * (y - pi))[:, None] * Dt)
        elif theta.family == "poisson":
            lam = np.exp(Dt @ theta.beta[z])
            cols.append((t * (y - lam))[:, None] * Dt)
        else:  # multinomial
            scores = Dt @ theta.beta[z].T
            m = scores.max(axis=1, keepdims=True)
            pi = np.exp(scores - m)
            pi /= pi.sum(axis=1, keepdims=True)
            ind = np.zeros((n, theta.K))
            ind[np.arange(n), y - 1] = 1.0
            E = (ind - pi)[:, : theta.K - 1]
            cols.append((t[:, None, None] * E[:, :, None] * Dt[:, None, :]).reshape(n, -1))
    return np.concatenate(cols, axis=1)


def score_vector(y, x: np.ndarray, theta: MoeParams) -> np.ndarray:
    """Gradient of the mixture log density at one observation."""
    data = Dataset(np.atleast_2d(x), np.atleast_1d(y), theta.response_kind(), K=theta.K)
    return score_matrix(data, theta)[0]


@dataclass
class SandwichCovariance:
    bread: np.ndarray   # average per-row Hessian of the log density
    meat: np.ndarray    # average outer product of per-row scores
    cov: np.ndarray     # sampling covariance of theta-hat
    labels: list[str]


def _total_score(data: Dataset, theta: MoeParams, vec: np.ndarray) -> np.ndarray:
    return score_matrix(data, unflatten_params(theta, vec)).sum(axis=0)


def sandwich_covariance(data: Dataset, theta: MoeParams) -> SandwichCovariance:
    """Bread-inverse meat bread-inverse covariance of the fitted parameters."""
    vec = flatten_params(theta)
    dim = vec.size
    S = score_matrix(data, theta)
    meat = S.T @ S / data.n
    bread = np.empty((dim, dim))
    for j in range(dim):
        h = HESSIAN_FD_STEP * (1.0 + abs(vec[j]))
        up, dn = vec.copy(), vec.copy()
        up[j] += h
        dn[j] -= h
        bread[:, j] = (_total_score(data, theta, up) - _total_score(data, theta, dn)) / (2.0 * h)
    bread = 0.5 * (bread + bread.T) / data.n
    try:
        binv = np.linalg.inv(bread)
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(bread)
        raise InferenceError(
            f"bread matrix is singular (condition number {cond:.3e}); "
            "the fitted root may be non-isolated"
        ) from None
    cov = binv @ meat @ binv / data.n
    cov = 0.5 * (cov + cov.T)
    return SandwichCovariance(bread=bread, meat=meat, cov=cov,
                              labels=param_labels(theta))


def standard_errors(sw: SandwichCovariance) -> np.ndarray:
    return np.sqrt(np.maximum(np.diag(sw.cov), 0.0))


def mean_ci(x: np.ndarray, theta: MoeParams, cov: np.ndarray,
            level: float = 0.95) -> tuple[float, float]:
    """Delta-method confidence interval for the mean function at ``x``."""
    if theta.family != "gaussian":
        raise InferenceError("mean intervals require gaussian experts")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    vec = flatten_params(theta)
    grad = np.empty(vec.size)
    for j in range(vec.size):
        h = 1e-6 * (1.0 + abs(vec[j]))
        up, dn = vec.copy(), vec.copy()
        up[j] += h
        dn[j] -= h
        grad[j] = (predict_mean(x, unflatten_params(theta, up))
                   - predict_mean(x, unflatten_params(theta, dn))) / (2.0 * h)
    m = predict_mean(x, theta)
    var = float(grad @ cov @ grad)
    half = norm.ppf(0.5 * (1.0 + level)) * np.sqrt(max(var, 0.0))
    return m - half, m + half
