"""Core model evaluations for soft-max gated mixture-of-experts models.

Everything here is a pure function of immutable inputs: gating probabilities,
expert log densities, the mixture log density, the log-quasi-likelihood, and
component responsibilities.  All density work happens in log space with
max-subtraction stabilization so that large linear predictors never overflow.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

FAMILIES = ("gaussian", "logistic", "poisson", "multinomial")

RESPONSE_KIND_FOR_FAMILY = {
    "gaussian": "real",
    "logistic": "binary",
    "poisson": "count",
    "multinomial": "categorical",
}


class ModelError(ValueError):
    """Invalid model inputs (dimension mismatch, bad parameters, ...)."""


@dataclass(frozen=True)
class ExpertDesign:
    """Transform from a raw covariate point to the expert design row.

    ``raw`` uses the covariates as-is (width p).  ``poly`` uses powers of the
    first covariate, x1, x1^2, ..., x1^degree (width degree); the gating
    always sees the raw covariates.
    """

    kind: str = "raw"
    degree: int = 2

    def __post_init__(self):
        if self.kind not in ("raw", "poly"):
            raise ModelError(f"unknown expert design kind: {self.kind!r}")
        if self.kind == "poly" and self.degree < 1:
            raise ModelError("polynomial design degree must be >= 1")

    def width(self, p: int) -> int:
        return p if self.kind == "raw" else self.degree

    def matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "raw":
            return X
        t = X[:, 0]
        return np.column_stack([t ** k for k in range(1, self.degree + 1)])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "degree": self.degree}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertDesign":
        return cls(kind=d["kind"], degree=int(d.get("degree", 2)))


@dataclass
class Dataset:
    """n observations of p covariates plus a typed response.

    ``kind`` is one of real / binary / count / categorical; ``K`` is required
    for categorical responses (labels in 1..K).  ``z_true`` optionally carries
    latent generating labels from a simulator (1..g).
    """

    X: np.ndarray
    y: np.ndarray
    kind: str
    K: int | None = None
    z_true: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if self.kind == "real":
            self.y = np.asarray(self.y, dtype=float)
        else:
            self.y = np.asarray(self.y)
            if not np.issubdtype(self.y.dtype, np.integer):
                yf = np.asarray(self.y, dtype=float)
                yi = yf.astype(int)
                if not np.all(yf == yi):
                    raise ModelError(f"{self.kind} responses must be integers")
                self.y = yi
        if self.X.shape[0] != self.y.shape[0]:
            raise ModelError("X and y row counts differ")
        if self.X.shape[0] < 1:
            raise ModelError("dataset must contain at least one row")
        if not np.all(np.isfinite(self.X)):
            raise ModelError("covariates must be finite")
        if self.kind not in ("real", "binary", "count", "categorical"):
            raise ModelError(f"unknown response kind: {self.kind!r}")
        if self.kind == "real" and not np.all(np.isfinite(self.y)):
            raise ModelError("real responses must be finite")
        if self.kind == "binary" and not np.all((self.y == 0) | (self.y == 1)):
            raise ModelError("binary responses must lie in {0, 1}")
        if self.kind == "count" and not np.all(self.y >= 0):
            raise ModelError("count responses must be non-negative")
        if self.kind == "categorical":
            if self.K is None or self.K < 2:
                raise ModelError("categorical data requires K >= 2")
            if not np.all((self.y >= 1) & (self.y <= self.K)):
                raise ModelError("category labels must lie in 1..K")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass
class MoeParams:
    """Full parameter vector of a g-component MoE model.

    gating has shape (g, p+1) with the last row pinned to zero (reference
    component).  For gaussian / logistic / poisson experts ``beta`` has shape
    (g, d+1) where d is the expert design width; for multinomial experts it
    has shape (g, K, d+1) with class K pinned to zero.  ``sigma2`` holds the
    g gaussian variances.
    """

    family: str
    gating: np.ndarray
    beta: np.ndarray
    design: ExpertDesign = field(default_factory=ExpertDesign)
    sigma2: np.ndarray | None = None
    K: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown expert family: {self.family!r}")
        self.gating = np.atleast_2d(np.asarray(self.gating, dtype=float))
        self.beta = np.asarray(self.beta, dtype=float)
        if not np.all(np.isfinite(self.gating)) or not np.all(np.isfinite(self.beta)):
            raise ModelError("parameters must be finite")
        g = self.gating.shape[0]
        if self.family == "multinomial":
            if self.K is None or self.K < 2:
                raise ModelError("multinomial experts require K >= 2")
            if self.beta.ndim != 3 or self.beta.shape[:2] != (g, self.K):
                raise ModelError("multinomial beta must have shape (g, K, d+1)")
        else:
            if self.beta.ndim != 2 or self.beta.shape[0] != g:
                raise ModelError("beta must have shape (g, d+1)")
        if self.family == "gaussian":
            if self.sigma2 is None:
                raise ModelError("gaussian experts require sigma2")
            self.sigma2 = np.asarray(self.sigma2, dtype=float)
            if self.sigma2.shape != (g,):
                raise ModelError("sigma2 must have shape (g,)")
            if not np.all(self.sigma2 > 0):
                raise ModelError("gaussian variances must be positive")

    @property
    def g(self) -> int:
        return self.gating.shape[0]

    @property
    def p(self) -> int:
        return self.gating.shape[1] - 1

    @property
    def expert_width(self) -> int:
        return self.design.width(self.p)

    def response_kind(self) -> str:
        return RESPONSE_KIND_FOR_FAMILY[self.family]

    def copy(self) -> "MoeParams":
        return replace(
            self,
            gating=self.gating.copy(),
            beta=self.beta.copy(),
            sigma2=None if self.sigma2 is None else self.sigma2.copy(),
        )


def add_intercept(A: np.ndarray) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return np.column_stack([np.ones(A.shape[0]), A])


def check_compatible(data: Dataset, theta: MoeParams) -> None:
    if data.p != theta.p:
        raise ModelError(f"dataset has p={data.p} but model expects p={theta.p}")
    if data.kind != theta.response_kind():
        raise ModelError(
            f"response kind {data.kind!r} does not match {theta.family!r} experts"
        )
    if theta.family == "multinomial" and data.K != theta.K:
        raise ModelError(f"dataset K={data.K} but model K={theta.K}")


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction."""
    m = np.max(scores, axis=-1, keepdims=True)
    shifted = scores - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def gate_log_probs(X: np.ndarray, gating: np.ndarray) -> np.ndarray:
    """Log gating probabilities, shape (n, g)."""
    gating = np.atleast_2d(np.asarray(gating, dtype=float))
    Xt = add_intercept(X)
    if Xt.shape[1] != gating.shape[1]:
        raise ModelError(
            f"gating expects {gating.shape[1] - 1} covariates, got {Xt.shape[1] - 1}"
        )
    if not np.all(np.isfinite(Xt)):
        raise ModelError("covariates must be finite")
    return _log_softmax(Xt @ gating.T)


def gate_probs(x: np.ndarray, gating: np.ndarray) -> np.ndarray:
    """Gating probabilities at a single covariate point, shape (g,)."""
    return np.exp(gate_log_probs(np.atleast_2d(x), gating))[0]


def expert_log_density_matrix(data: Dataset, theta: MoeParams) -> np.ndarray:
    """Per-row, per-component expert log densities, shape (n, g)."""
    check_compatible(data, theta)
    D = theta.design.matrix(data.X)
    Dt = add_intercept(D)
    y = data.y
    if theta.family == "gaussian":
        mu = Dt @ theta.beta.T  # (n, g)
        resid2 = (y[:, None] - mu) ** 2
        return -0.5 * (np.log(2 * np.pi * theta.sigma2)[None, :] + resid2 / theta.sigma2[None, :])
    if theta.family == "logistic":
        s = Dt @ theta.beta.T
        # y*s - log(1 + e^s), stabilized
        return y[:, None] * s - np.logaddexp(0.0, s)
    if theta.family == "poisson":
        s = Dt @ theta.beta.T
        return y[:, None] * s - np.exp(s) - gammaln(y + 1.0)[:, None]
    # multinomial: class scores (n, g, K) -> pick the observed class
    scores = np.einsum("nd,gkd->ngk", Dt, theta.beta)
    logp = _log_softmax(scores)
    return logp[np.arange(data.n), :, y - 1]


def expert_log_density(y, x: np.ndarray, theta: MoeParams, z: int) -> float:
    """Log density of a single expert z (0-based) at one observation."""
    data = Dataset(np.atleast_2d(x), np.atleast_1d(y), theta.response_kind(), K=theta.K)
    return float(expert_log_density_matrix(data, theta)[0, z])


def _joint_log_density(data: Dataset, theta: MoeParams) -> np.ndarray:
    """log gate + log expert per row and component, shape (n, g)."""
    return gate_log_probs(data.X, theta.gating) + expert_log_density_matrix(data, theta)


def moe_log_density_rows(data: Dataset, theta: MoeParams) -> np.ndarray:
    """Per-row mixture log densities, shape (n,)."""
    joint = _joint_log_density(data, theta)
    m = np.max(joint, axis=1)
    return m + np.log(np.sum(np.exp(joint - m[:, None]), axis=1))


def moe_log_density(y, x: np.ndarray, theta: MoeParams) -> float:
    data = Dataset(np.atleast_2d(x), np.atleast_1d(y), theta.response_kind(), K=theta.K)
    return float(moe_log_density_rows(data, theta)[0])


def log_quasi_likelihood(data: Dataset, theta: MoeParams) -> float:
    """Sum of per-row mixture log densities, left-to-right."""
    rows = moe_log_density_rows(data, theta)
    total = 0.0
    for v in rows:
        total += v
    return total


def responsibilities(data: Dataset, theta: MoeParams) -> np.ndarray:
    """Posterior component probabilities per row, shape (n, g), row-stochastic."""
    joint = _joint_log_density(data, theta)
    m = np.max(joint, axis=1, keepdims=True)
    w = np.exp(joint - m)
    return w / np.sum(w, axis=1, keepdims=True)


def permute_components(theta: MoeParams, perm) -> MoeParams:
    """Reorder components by ``perm`` and re-apply the reference normalization.

    The new last component's gating row is subtracted from every row so the
    reference block is exactly zero again; gate probabilities are unchanged.
    """
    perm = np.asarray(perm, dtype=int)
    if sorted(perm.tolist()) != list(range(theta.g)):
        raise ModelError("perm must be a permutation of 0..g-1")
    gating = theta.gating[perm]
    gating = gating - gating[-1][None, :]
    out = theta.copy()
    out.gating = gating
    out.beta = theta.beta[perm]
    if theta.sigma2 is not None:
        out.sigma2 = theta.sigma2[perm]
    return out
