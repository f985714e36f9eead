"""Component-count selection by BIC over a grid of candidate g values."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .estimation import EstimationError, FitConfig, FitResult, multi_start_fit
from .model import Dataset, ExpertDesign


class SelectionError(RuntimeError):
    """No eligible fit on the whole candidate grid."""


def param_count(g: int, p: int, family: str,
                design: ExpertDesign | None = None, K: int | None = None) -> int:
    """Number of free parameters of a g-component model.

    Gating contributes (g-1)(p+1); experts contribute per family with d the
    expert design width.
    """
    design = design or ExpertDesign()
    d = design.width(p)
    gating = (g - 1) * (p + 1)
    if family == "gaussian":
        experts = g * (d + 2)
    elif family in ("logistic", "poisson"):
        experts = g * (d + 1)
    elif family == "multinomial":
        if K is None or K < 2:
            raise ValueError("multinomial param count requires K >= 2")
        experts = g * (K - 1) * (d + 1)
    else:
        raise ValueError(f"unknown family: {family!r}")
    return gating + experts


def bic(q_hat: float, dim: int, n: int) -> float:
    """-2 * logQL + dim * ln(n); smaller is better."""
    return -2.0 * q_hat + dim * np.log(n)


@dataclass
class GFit:
    g: int
    q_hat: float
    dim: int
    bic: float
    converged: bool
    degenerate: bool
    fit: FitResult | None = None
    error: str | None = None

    @property
    def eligible(self) -> bool:
        return self.fit is not None and self.converged and not self.degenerate


@dataclass
class SelectionReport:
    rows: list[GFit]
    g_hat: int
    grid: list[int] = field(default_factory=list)

    def best(self) -> GFit:
        return next(r for r in self.rows if r.g == self.g_hat)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("g,logQL,dim,bic,converged,degenerate\n")
        for r in self.rows:
            q = "" if r.fit is None else repr(r.q_hat)
            b = "" if r.fit is None else repr(r.bic)
            buf.write(f"{r.g},{q},{r.dim},{b},"
                      f"{int(r.converged)},{int(r.degenerate)}\n")
        return buf.getvalue()


def select_g(data: Dataset, G: int, family: str,
             design: ExpertDesign | None = None,
             config: FitConfig | None = None,
             n_threads: int = 1) -> SelectionReport:
    """Fit g = 1..G with multi-start and pick the smallest g at minimal BIC.

    Degenerate (variance-floored) and non-converged fits appear in the report
    but are never selectable.
    """
    if G < 1:
        raise ValueError("G must be >= 1")
    design = design or ExpertDesign()
    config = config or FitConfig()
    rows = []
    for g in range(1, G + 1):
        dim = param_count(g, data.p, family, design, data.K)
        try:
            result = multi_start_fit(data, g, family, design, config,
                                     n_threads=n_threads)
        except EstimationError as err:
            rows.append(GFit(g=g, q_hat=np.nan, dim=dim, bic=np.nan,
                             converged=False, degenerate=False, error=str(err)))
            continue
        rows.append(GFit(
            g=g,
            q_hat=result.q_hat,
            dim=dim,
            bic=bic(result.q_hat, dim, data.n),
            converged=result.converged,
            degenerate=result.degenerate,
            fit=result,
        ))
    eligible = [r for r in rows if r.eligible]
    if not eligible:
        detail = "; ".join(
            f"g={r.g}: " + (r.error or
                            ("degenerate" if r.degenerate else "not converged"))
            for r in rows)
        raise SelectionError(f"no eligible fit on grid 1..{G} ({detail})")
    best_bic = min(r.bic for r in eligible)
    g_hat = min(r.g for r in eligible if r.bic <= best_bic + 1e-12 * (1.0 + abs(best_bic)))
    return SelectionReport(rows=rows, g_hat=g_hat, grid=list(range(1, G + 1)))
