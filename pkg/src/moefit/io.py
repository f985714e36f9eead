"""File formats: CSV datasets and JSON model documents.

Datasets are plain comma-separated files with a mandatory header
(x1..xp, y[, z_true]); categorical responses are integers 1..K.  Models are
JSON with all coefficient blocks stored explicitly (including the zero
reference blocks) so that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .model import Dataset, ExpertDesign, ModelError, MoeParams

SCHEMA_VERSION = 1

KIND_FOR_FAMILY = {
    "gaussian": "real",
    "logistic": "binary",
    "poisson": "count",
    "multinomial": "categorical",
}


class FormatError(ValueError):
    pass


def write_dataset_csv(path, data: Dataset) -> None:
    path = Path(path)
    cols = [f"x{j + 1}" for j in range(data.p)] + ["y"]
    if data.z_true is not None:
        cols.append("z_true")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(data.n):
            row = [repr(float(v)) for v in data.X[i]]
            row.append(repr(float(data.y[i])) if data.kind == "real" else str(int(data.y[i])))
            if data.z_true is not None:
                row.append(str(int(data.z_true[i])))
            w.writerow(row)


def read_dataset_csv(path, kind: str, K: int | None = None,
                     response_col: str = "y",
                     covariate_cols: list[str] | None = None) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if response_col not in header:
        raise FormatError(f"{path}: missing response column {response_col!r} "
                          f"(found columns: {header})")
    if covariate_cols is None:
        covariate_cols = [c for c in header if c not in (response_col, "z_true")]
    missing = [c for c in covariate_cols if c not in header]
    if missing:
        raise FormatError(f"{path}: missing covariate column(s) {missing} "
                          f"(found columns: {header})")
    xi = [header.index(c) for c in covariate_cols]
    yi = header.index(response_col)
    zi = header.index("z_true") if "z_true" in header else None
    try:
        X = np.array([[float(r[j]) for j in xi] for r in rows])
        y = np.array([float(r[yi]) for r in rows])
        z = None if zi is None else np.array([int(float(r[zi])) for r in rows])
    except (ValueError, IndexError) as err:
        raise FormatError(f"{path}: malformed row ({err})") from None
    if X.size == 0:
        X = X.reshape(len(rows), 0)
    return Dataset(X, y, kind, K=K, z_true=z)


def write_sidecar_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def model_to_dict(theta: MoeParams, fit_meta: dict | None = None,
                  covariance: dict | None = None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "family": theta.family,
        "g": theta.g,
        "p": theta.p,
        "expert_design": theta.design.to_dict(),
        "gating": theta.gating.tolist(),
        "experts": {"beta": theta.beta.tolist()},
    }
    if theta.K is not None:
        doc["K"] = theta.K
    if theta.sigma2 is not None:
        doc["experts"]["sigma2"] = theta.sigma2.tolist()
    if fit_meta:
        doc["fit"] = fit_meta
    if covariance:
        doc["covariance"] = covariance
    return doc


def model_from_dict(doc: dict) -> MoeParams:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(
            f"unsupported model schema_version {doc.get('schema_version')!r}, "
            f"expected {SCHEMA_VERSION}"
        )
    try:
        experts = doc["experts"]
        return MoeParams(
            family=doc["family"],
            gating=np.asarray(doc["gating"], dtype=float),
            beta=np.asarray(experts["beta"], dtype=float),
            design=ExpertDesign.from_dict(doc["expert_design"]),
            sigma2=(np.asarray(experts["sigma2"], dtype=float)
                    if "sigma2" in experts else None),
            K=doc.get("K"),
        )
    except (KeyError, ModelError) as err:
        raise FormatError(f"malformed model document: {err}") from None


def save_model(path, theta: MoeParams, fit_meta: dict | None = None,
               covariance: dict | None = None) -> None:
    doc = model_to_dict(theta, fit_meta, covariance)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_model(path) -> tuple[MoeParams, dict]:
    doc = json.loads(Path(path).read_text())
    return model_from_dict(doc), doc
