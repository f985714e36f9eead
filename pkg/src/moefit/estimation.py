"""Blockwise minorization-maximization fitting of MoE models.

One outer cycle sweeps the g-1 gating blocks and then the joint expert block.
Responsibilities are recomputed at the current iterate before every block
update, so each surrogate is anchored at the immediately preceding iterate and
the log-quasi-likelihood never decreases.  Gating blocks use the quadratic
curvature-bound update; gaussian expert blocks have closed-form weighted
least-squares solutions; GLM expert blocks use ascent-guarded Newton steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln

from .model import (
    Dataset,
    ExpertDesign,
    MoeParams,
    add_intercept,
    check_compatible,
    expert_log_density_matrix,
    gate_log_probs,
    log_quasi_likelihood,
    responsibilities,
)

STARVATION_FACTOR = 1e-12
GLM_COEF_CAP = 30.0


class EstimationError(RuntimeError):
    """Base class for fit failures."""


class RankDeficientError(EstimationError):
    """Singular design or weighted Gram matrix (constant/collinear columns)."""


class EmptyComponentError(EstimationError):
    """A component's total responsibility fell below the starvation threshold."""


class InfeasibleInitError(EstimationError):
    """Too few observations to initialize the requested number of components."""


@dataclass
class FitConfig:
    max_cycles: int = 1000
    rel_tol: float = 1e-8
    variance_floor_factor: float = 1e-10
    n_starts: int = 10
    seed: int = 0
    irls_max_inner: int = 25
    # hybrid gating acceleration: number of gating sub-sweeps per outer cycle,
    # and whether to lengthen each curvature-bound step while it still improves
    # the objective (factor 1 is always the plain curvature-bound step)
    gating_rounds: int = 3
    gating_step_expand: bool = True

    def __post_init__(self):
        if self.max_cycles < 1 or self.n_starts < 1:
            raise ValueError("max_cycles and n_starts must be >= 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.gating_rounds < 1:
            raise ValueError("gating_rounds must be >= 1")


@dataclass
class FitResult:
    theta: MoeParams
    q_trace: np.ndarray
    cycles_used: int
    converged: bool
    degenerate: bool
    seed_used: int

    @property
    def q_hat(self) -> float:
        return float(self.q_trace[-1])


def _solve_psd(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    try:
        c, low = cho_factor(A)
    except np.linalg.LinAlgError:
        raise RankDeficientError(
            f"singular {what}: constant or collinear covariate columns"
        ) from None
    return cho_solve((c, low), b)


def gating_gram(data: Dataset) -> np.ndarray:
    """H = sum of x-tilde outer products over the sample."""
    Xt = add_intercept(data.X)
    return Xt.T @ Xt


def gating_block_update(data: Dataset, theta: MoeParams, z: int,
                        H: np.ndarray | None = None,
                        tau: np.ndarray | None = None) -> np.ndarray:
    """Curvature-bound update of gating block z (0-based, z < g-1)."""
    if not 0 <= z < theta.g - 1:
        raise ValueError("gating block index must lie in [0, g-1)")
    Xt = add_intercept(data.X)
    if H is None:
        H = Xt.T @ Xt
    if tau is None:
        tau = responsibilities(data, theta)
    gates = np.exp(gate_log_probs(data.X, theta.gating))
    grad = Xt.T @ (tau[:, z] - gates[:, z])
    step = _solve_psd(H, grad, "gating design Gram matrix")
    return theta.gating[z] + 4.0 * step


def gating_surrogate_value(data: Dataset, theta: MoeParams, z: int,
                           alpha: np.ndarray) -> float:
    """Value of the quadratic block-z surrogate at gating row ``alpha``.

    Equals the log-quasi-likelihood when alpha is the current block (anchor)
    and lies below it elsewhere; used by the minorization test suite.
    """
    Xt = add_intercept(data.X)
    H = Xt.T @ Xt
    tau = responsibilities(data, theta)
    gates = np.exp(gate_log_probs(data.X, theta.gating))
    grad = Xt.T @ (tau[:, z] - gates[:, z])
    d = np.asarray(alpha, dtype=float) - theta.gating[z]
    return log_quasi_likelihood(data, theta) + d @ grad - 0.125 * d @ H @ d


def gating_curvature_hessian(data: Dataset, theta: MoeParams, z: int) -> np.ndarray:
    """Exact Hessian of the gating surrogate's smooth part at block z."""
    Xt = add_intercept(data.X)
    gates = np.exp(gate_log_probs(data.X, theta.gating))
    a = gates[:, z] * (1.0 - gates[:, z])
    return -(Xt * a[:, None]).T @ Xt


def variance_floor(data: Dataset, config: FitConfig) -> float:
    v = float(np.var(data.y.astype(float)))
    return config.variance_floor_factor * max(v, np.finfo(float).tiny)


def _check_starvation(tau: np.ndarray, n: int) -> None:
    col = tau.sum(axis=0)
    starved = np.where(col < n * STARVATION_FACTOR)[0]
    if starved.size:
        raise EmptyComponentError(
            f"component(s) {(starved + 1).tolist()} starved "
            f"(total responsibility below {n * STARVATION_FACTOR:.3e})"
        )


def gaussian_expert_block_update(data: Dataset, theta: MoeParams,
                                 floor: float,
                                 tau: np.ndarray | None = None):
    """Closed-form weighted LS update of all gaussian expert blocks.

    Returns (beta, sigma2, floored) where ``floored`` marks variance-floored
    components.
    """
    if theta.family != "gaussian":
        raise EstimationError("gaussian update requires gaussian experts")
    if tau is None:
        tau = responsibilities(data, theta)
    _check_starvation(tau, data.n)
    Dt = add_intercept(theta.design.matrix(data.X))
    y = data.y
    g = theta.g
    beta = np.empty_like(theta.beta)
    sigma2 = np.empty(g)
    floored = np.zeros(g, dtype=bool)
    for z in range(g):
        w = tau[:, z]
        G = (Dt * w[:, None]).T @ Dt
        b = Dt.T @ (w * y)
        beta[z] = _solve_psd(G, b, f"weighted Gram matrix of component {z + 1}")
        resid = y - Dt @ beta[z]
        s2 = float(w @ resid ** 2 / w.sum())
        if s2 < floor:
            s2 = floor
            floored[z] = True
        sigma2[z] = s2
    return beta, sigma2, floored


def _glm_ll(family: str, Dt: np.ndarray, y: np.ndarray, w: np.ndarray,
            beta: np.ndarray, K: int | None) -> float:
    """Weighted log-likelihood of one GLM expert."""
    if family == "multinomial":
        scores = Dt @ beta.T
        m = scores.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(scores - m).sum(axis=1))
        return float(w @ (scores[np.arange(len(y)), y - 1] - lse))
    s = Dt @ beta
    if family == "logistic":
        return float(w @ (y * s - np.logaddexp(0.0, s)))
    return float(w @ (y * s - np.exp(s) - gammaln(y + 1.0)))


def _glm_grad_hess(family: str, Dt: np.ndarray, y: np.ndarray, w: np.ndarray,
                   beta: np.ndarray, K: int | None):
    """Gradient and Hessian (flattened) of the weighted expert log-likelihood."""
    if family == "multinomial":
        # beta: (K, d+1) with class K pinned at zero
        scores = Dt @ beta.T
        m = scores.max(axis=1, keepdims=True)
        pi = np.exp(scores - m)
        pi /= pi.sum(axis=1, keepdims=True)
        ind = np.zeros_like(pi)
        ind[np.arange(len(y)), y - 1] = 1.0
        E = (ind - pi)[:, : K - 1]
        grad = Dt.T @ (w[:, None] * E)  # (d+1, K-1)
        P = pi[:, : K - 1]
        wP = w[:, None] * P
        d1 = Dt.shape[1]
        hess = np.empty((K - 1, d1, K - 1, d1))
        for k in range(K - 1):
            for l in range(k, K - 1):
                wkl = wP[:, k] * P[:, l]
                if l == k:
                    wkl = wkl - wP[:, k]
                block = (Dt * wkl[:, None]).T @ Dt
                hess[k, :, l, :] = block
                hess[l, :, k, :] = block
        return grad.T.ravel(), hess.reshape((K - 1) * d1, (K - 1) * d1)
    s = Dt @ beta
    if family == "logistic":
        mu = 1.0 / (1.0 + np.exp(-s))
        var = mu * (1.0 - mu)
    else:  # poisson
        mu = np.exp(s)
        var = mu
    grad = Dt.T @ (w * (y - mu))
    hess = -(Dt * (w * var)[:, None]).T @ Dt
    return grad, hess


def _weighted_glm_fit(family: str, Dt: np.ndarray, y: np.ndarray, w: np.ndarray,
                      beta0: np.ndarray, max_inner: int, K: int | None):
    """Newton steps with step-halving on the weighted expert log-likelihood.

    Returns (beta, capped) where ``capped`` signals coefficients clipped at
    the separation cap on the linear-predictor scale.
    """
    beta = beta0.copy()
    ll = _glm_ll(family, Dt, y, w, beta, K)
    capped = False
    for _ in range(max_inner):
        grad, hess = _glm_grad_hess(family, Dt, y, w, beta, K)
        if np.max(np.abs(grad)) < 1e-9 * (1.0 + abs(ll)):
            break
        A = -hess + 1e-10 * np.eye(hess.shape[0])
        try:
            delta = np.linalg.solve(A, grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(delta)):
            break
        step = 1.0
        improved = False
        for _ in range(30):
            if family == "multinomial":
                cand = beta.copy()
                cand[: K - 1] = beta[: K - 1] + step * delta.reshape(K - 1, Dt.shape[1])
            else:
                cand = beta + step * delta
            ll_new = _glm_ll(family, Dt, y, w, cand, K)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * (1.0 + abs(ll)):
                improved = ll_new > ll
                beta, ll = cand, ll_new
                break
            step *= 0.5
        if not improved:
            break
    if family in ("logistic", "multinomial") and np.any(np.abs(beta) > GLM_COEF_CAP):
        clipped = np.clip(beta, -GLM_COEF_CAP, GLM_COEF_CAP)
        if family == "multinomial":
            clipped[K - 1] = 0.0
        ll_c = _glm_ll(family, Dt, y, w, clipped, K)
        ll0 = _glm_ll(family, Dt, y, w, beta0, K)
        # keep the clipped solution only if it still improves on the start
        beta = clipped if ll_c >= ll0 else beta0.copy()
        capped = True
    return beta, capped


def glm_expert_block_update(data: Dataset, theta: MoeParams,
                            config: FitConfig,
                            tau: np.ndarray | None = None):
    """Update all GLM expert blocks; returns (beta, any_capped)."""
    if theta.family == "gaussian":
        raise EstimationError("use gaussian_expert_block_update for gaussian experts")
    if tau is None:
        tau = responsibilities(data, theta)
    _check_starvation(tau, data.n)
    Dt = add_intercept(theta.design.matrix(data.X))
    beta = theta.beta.copy()
    any_capped = False
    for z in range(theta.g):
        beta[z], capped = _weighted_glm_fit(
            theta.family, Dt, data.y, tau[:, z], theta.beta[z],
            config.irls_max_inner, theta.K,
        )
        any_capped = any_capped or capped
    return beta, any_capped


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def _joint_stats(scores: np.ndarray, L: np.ndarray):
    """Responsibilities and objective value from gating scores and cached
    expert log densities; returns (tau, q)."""
    joint = scores + L
    lse_joint = _logsumexp_rows(joint)
    q = float(np.sum(lse_joint - _logsumexp_rows(scores)))
    tau = np.exp(joint - lse_joint[:, None])
    return tau, q


def _joint_q(scores: np.ndarray, L: np.ndarray) -> float:
    """Objective value only; cheaper than _joint_stats for trial steps."""
    return float(np.sum(_logsumexp_rows(scores + L) - _logsumexp_rows(scores)))


def _lse_excluding(A: np.ndarray, z: int) -> np.ndarray:
    """Row-wise log-sum-exp over all columns except z."""
    B = A.copy()
    B[:, z] = -np.inf
    return _logsumexp_rows(B)


def fit(data: Dataset, init: MoeParams, config: FitConfig | None = None,
        seed_used: int = 0) -> FitResult:
    """Run the blockwise-MM algorithm from ``init`` until convergence.

    Expert parameters are fixed during the gating sweep, so the expert
    log-density matrix is computed once per cycle and every gating update and
    objective evaluation in the sweep reuses it.  Each gating block step
    follows the curvature-bound direction; with ``gating_step_expand`` the
    step length is doubled as long as the objective keeps improving, which
    cuts cycle counts sharply while preserving monotone ascent.
    """
    config = config or FitConfig()
    check_compatible(data, init)
    theta = init.copy()
    g = theta.g
    H = gating_gram(data) if g > 1 else None
    floor = variance_floor(data, config) if theta.family == "gaussian" else 0.0
    Xt = add_intercept(data.X)
    L = expert_log_density_matrix(data, theta)
    scores = Xt @ theta.gating.T
    J = scores + L
    tau, q = _joint_stats(scores, L)
    step_factor = np.ones(max(g - 1, 1))
    trial = np.empty(data.n)
    den = np.empty(data.n)
    trace = [q]
    converged = False
    degenerate = False
    cycle = 0
    for cycle in range(1, config.max_cycles + 1):
        try:
            q_cur = q
            for _ in range(config.gating_rounds if g > 1 else 0):
                for z in range(g - 1):
                    # only column z of the gating scores moves during this
                    # block update, so log-sum-exp over the other columns is
                    # fixed and each trial step costs two logaddexp passes
                    rest_s = _lse_excluding(scores, z)
                    rest_j = _lse_excluding(J, z)
                    col0 = scores[:, z].copy()
                    lse_s = np.logaddexp(rest_s, col0)
                    lse_j = np.logaddexp(rest_j, J[:, z])
                    q_cur = float(np.sum(lse_j - lse_s))
                    tau_z = np.exp(J[:, z] - lse_j)
                    gate_z = np.exp(col0 - lse_s)
                    grad = Xt.T @ (tau_z - gate_z)
                    direction = 4.0 * _solve_psd(H, grad,
                                                 "gating design Gram matrix")
                    dcol = Xt @ direction
                    Lz = L[:, z]

                    def q_at(f):
                        np.add(col0, f * dcol, out=trial)
                        np.logaddexp(rest_s, trial, out=den)
                        np.add(trial, Lz, out=trial)
                        np.logaddexp(rest_j, trial, out=trial)
                        np.subtract(trial, den, out=trial)
                        return float(trial.sum())

                    # start from the step length this block last accepted,
                    # shrinking toward the plain curvature-bound step (factor
                    # 1) whenever the longer step no longer improves
                    factor = step_factor[z] if config.gating_step_expand else 1.0
                    q_new = q_at(factor)
                    while factor > 1.0 and not (
                            np.isfinite(q_new) and q_new > q_cur):
                        factor /= 2.0
                        q_new = q_at(factor)
                    if not np.isfinite(q_new) or q_new < q_cur - 1e-10 * (1.0 + abs(q_cur)):
                        # guard: never lose ground on the objective
                        step_factor[z] = 1.0
                        continue
                    if config.gating_step_expand:
                        while factor < 64.0:
                            q_try = q_at(2.0 * factor)
                            if not np.isfinite(q_try) or q_try <= q_new:
                                break
                            factor *= 2.0
                            q_new = q_try
                    step_factor[z] = factor
                    scores[:, z] = col0 + factor * dcol
                    J[:, z] = scores[:, z] + Lz
                    theta.gating[z] = theta.gating[z] + factor * direction
                    q_cur = q_new
            if g > 1:
                tau, q_cur = _joint_stats(scores, L)
            if theta.family == "gaussian":
                beta, sigma2, floored = gaussian_expert_block_update(
                    data, theta, floor, tau=tau)
                theta.beta, theta.sigma2 = beta, sigma2
                degenerate = bool(floored.any())
                L = expert_log_density_matrix(data, theta)
                tau, q_new = _joint_stats(scores, L)
            else:
                beta, _ = glm_expert_block_update(data, theta, config, tau=tau)
                old_beta, old_L = theta.beta, L
                theta.beta = beta
                L = expert_log_density_matrix(data, theta)
                tau_new, q_new = _joint_stats(scores, L)
                # ascent guard: a capped/aborted inner solve must not lose ground
                if q_new < q_cur - 1e-10 * (1.0 + abs(q_cur)):
                    theta.beta, L = old_beta, old_L
                    tau, q_new = _joint_stats(scores, L)
                else:
                    tau = tau_new
            J = scores + L
        except EstimationError as err:
            raise EstimationError(f"cycle {cycle}: {err}") from err
        trace.append(q_new)
        if abs(q_new - q) <= config.rel_tol * (1.0 + abs(q)):
            converged = True
            q = q_new
            break
        q = q_new
    return FitResult(
        theta=theta,
        q_trace=np.asarray(trace),
        cycles_used=cycle,
        converged=converged,
        degenerate=degenerate,
        seed_used=seed_used,
    )


def _random_hard_partition(data: Dataset, g: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Random seeded hard partition of rows into g nonempty groups.

    g random rows seed a short k-means pass over the standardized (x, y)
    rows, so groups follow the joint geometry of covariates and response
    (separated regression lines land in separate groups; 1-D sorted inputs
    yield near-contiguous segments).  Emptied groups are reseeded with the
    row farthest from its current center, which keeps every group nonempty.
    """
    n = data.n
    if g == 1:
        return np.zeros(n, dtype=int)
    Z = np.column_stack([data.X, data.y.astype(float)])
    sd = Z.std(axis=0)
    Z = (Z - Z.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    centers = Z[rng.choice(n, size=g, replace=False)].copy()
    labels = np.zeros(n, dtype=int)
    for _ in range(6):
        d2 = ((Z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        for z in range(g):
            members = labels == z
            if not members.any():
                far = int(np.argmax(d2[np.arange(n), labels]))
                labels[far] = z
                centers[z] = Z[far]
            else:
                centers[z] = Z[members].mean(axis=0)
    return labels


def initialize(data: Dataset, g: int, family: str, design: ExpertDesign,
               seed: int, config: FitConfig | None = None) -> MoeParams:
    """Seeded initialization from a random hard partition of the rows.

    Each expert is fit to its partition group with hard weights and the
    gating starts uniform (all zeros).  g=1 is deterministic.
    """
    config = config or FitConfig()
    d = design.width(data.p)
    if data.n < g * (d + 1):
        raise InfeasibleInitError(
            f"need at least {g * (d + 1)} rows to initialize g={g}, have {data.n}"
        )
    rng = np.random.default_rng(seed)
    n = data.n
    labels = _random_hard_partition(data, g, rng)
    Dt = add_intercept(design.matrix(data.X))
    floor = 0.0
    if family == "gaussian":
        floor = variance_floor(data, config)
    K = data.K if family == "multinomial" else None
    if family == "multinomial":
        beta = np.zeros((g, K, d + 1))
    else:
        beta = np.zeros((g, d + 1))
    sigma2 = np.ones(g) if family == "gaussian" else None
    for z in range(g):
        idx = np.where(labels == z)[0]
        w = np.zeros(n)
        w[idx] = 1.0
        if family == "gaussian":
            G = (Dt * w[:, None]).T @ Dt
            b = Dt.T @ (w * data.y)
            try:
                beta[z] = _solve_psd(G, b, "initialization Gram matrix")
            except RankDeficientError:
                beta[z] = _solve_psd(G + 1e-8 * np.eye(d + 1), b, "ridged init Gram")
            resid = data.y[idx] - Dt[idx] @ beta[z]
            sigma2[z] = max(float(np.mean(resid ** 2)), floor)
        else:
            start = np.zeros((K, d + 1)) if family == "multinomial" else np.zeros(d + 1)
            beta[z], _ = _weighted_glm_fit(
                family, Dt, data.y, w, start, config.irls_max_inner, K)
    gating = np.zeros((g, data.p + 1))
    return MoeParams(family=family, gating=gating, beta=beta, design=design,
                     sigma2=sigma2, K=K)


def multi_start_fit(data: Dataset, g: int, family: str,
                    design: ExpertDesign | None = None,
                    config: FitConfig | None = None,
                    n_threads: int = 1) -> FitResult:
    """Best-of-n_starts fit; seeds are config.seed, config.seed+1, ...

    The winner has the largest final log-quasi-likelihood, ties broken toward
    the lowest start index; the merge is deterministic regardless of how many
    threads ran the starts.
    """
    config = config or FitConfig()
    design = design or ExpertDesign()

    def run(k: int):
        seed_k = config.seed + k
        init = initialize(data, g, family, design, seed_k, config)
        return fit(data, init, config, seed_used=seed_k)

    results: list[tuple[int, FitResult]] = []
    failures = []
    if n_threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            futures = {k: pool.submit(run, k) for k in range(config.n_starts)}
        for k, fut in futures.items():
            try:
                results.append((k, fut.result()))
            except EstimationError as err:
                failures.append(f"start {k} (seed {config.seed + k}): {err}")
    else:
        for k in range(config.n_starts):
            try:
                results.append((k, run(k)))
            except EstimationError as err:
                failures.append(f"start {k} (seed {config.seed + k}): {err}")
    if not results:
        raise EstimationError("all starts failed:\n  " + "\n  ".join(failures))
    _, best = max(results, key=lambda kr: (kr[1].q_hat, -kr[0]))
    return best
