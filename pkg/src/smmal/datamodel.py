"""Semi-supervised dataset container, validation and CSV round-tripping.

Each row carries a label flag ``R``.  Treatment ``A`` and outcome ``Y`` are
stored as masked arrays whose mask is the complement of ``R``: reading a
masked value requires an explicit ``.filled(...)`` call, so unlabeled
entries can never leak into arithmetic by accident.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "SemiSupervisedDataset",
    "ValidationReport",
    "validate_dataset",
    "labeled_fraction",
    "make_dataset",
    "write_csv",
    "read_csv",
]


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SemiSupervisedDataset:
    label_flag: np.ndarray            # (N,) int 0/1
    treatment: np.ma.MaskedArray      # (N,) masked where unlabeled
    outcome: np.ma.MaskedArray        # (N,) masked where unlabeled
    confounders: np.ndarray           # (N, p+1), first column == 1
    surrogates: np.ndarray            # (N, q)
    bound_M: float = 1.0

    @property
    def n_rows(self) -> int:
        return int(self.label_flag.shape[0])

    @property
    def n_labeled(self) -> int:
        return int(np.sum(self.label_flag))

    @property
    def labeled(self) -> np.ndarray:
        return self.label_flag == 1

    @property
    def covariates(self) -> np.ndarray:
        """W = (X, S), the full always-observed feature matrix."""
        return np.hstack([self.confounders, self.surrogates])

    def labeled_subset(self) -> "SemiSupervisedDataset":
        """The labeled rows only, as a fully labeled dataset."""
        idx = np.flatnonzero(self.labeled)
        return make_dataset(
            np.ones(idx.size, dtype=int),
            self.treatment.filled(0)[idx],
            self.outcome.filled(0.0)[idx],
            self.confounders[idx],
            self.surrogates[idx],
            bound_M=self.bound_M,
        )


def make_dataset(label_flag, treatment, outcome, confounders, surrogates,
                 bound_M: float = 1.0) -> SemiSupervisedDataset:
    """Build a dataset, masking ``treatment``/``outcome`` wherever ``R == 0``.

    Values supplied on unlabeled rows are discarded.
    """
    r = np.asarray(label_flag).astype(int)
    unlabeled = r == 0
    a = np.ma.MaskedArray(np.asarray(treatment, dtype=float), mask=unlabeled.copy())
    y = np.ma.MaskedArray(np.asarray(outcome, dtype=float), mask=unlabeled.copy())
    a = a.filled(0.0)
    y = y.filled(0.0)
    return SemiSupervisedDataset(
        label_flag=_frozen(r),
        treatment=np.ma.MaskedArray(_frozen(a), mask=_frozen(unlabeled)),
        outcome=np.ma.MaskedArray(_frozen(y), mask=_frozen(unlabeled)),
        confounders=_frozen(np.asarray(confounders, dtype=float)),
        surrogates=_frozen(np.atleast_2d(np.asarray(surrogates, dtype=float).T).T),
        bound_M=float(bound_M),
    )


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_dataset(data: SemiSupervisedDataset) -> ValidationReport:
    """Check the structural invariants; report violations, never raise."""
    out = []
    r = np.asarray(data.label_flag)
    n = r.shape[0]
    if not np.isin(r, (0, 1)).all():
        out.append("label flag")
    lab = r == 1
    for name, col in (("treatment", data.treatment), ("outcome", data.outcome)):
        mask = np.ma.getmaskarray(col)
        if mask.shape != (n,) or not np.array_equal(mask, ~lab):
            out.append("masking")
            break
    x = np.asarray(data.confounders)
    if x.ndim != 2 or x.shape[0] != n:
        out.append("confounder shape")
    elif not np.all(x[:, 0] == 1.0):
        out.append("intercept column")
    s = np.asarray(data.surrogates)
    if s.ndim != 2 or s.shape[0] != n:
        out.append("surrogate shape")
    if "masking" not in out:
        a = np.asarray(data.treatment.data)[lab]
        y = np.asarray(data.outcome.data)[lab]
        if not np.isin(a, (0.0, 1.0)).all():
            out.append("treatment binary")
        if not np.all(np.abs(y) <= data.bound_M):
            out.append("bounded response")
    k = int(lab.sum())
    if not 0 < k < n:
        out.append("labeled count")
    return ValidationReport(tuple(dict.fromkeys(out)))


def labeled_fraction(data: SemiSupervisedDataset) -> float:
    """rho_hat = n / N."""
    return data.n_labeled / data.n_rows


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(data: SemiSupervisedDataset, path) -> None:
    p = data.confounders.shape[1]
    q = data.surrogates.shape[1]
    header = ["R", "A", "Y"] + [f"X{j + 1}" for j in range(p)] + [f"S{j + 1}" for j in range(q)]
    a = data.treatment
    y = data.outcome
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(data.n_rows):
            row = [str(int(data.label_flag[i]))]
            row.append("" if a.mask[i] else _fmt(a.data[i]))
            row.append("" if y.mask[i] else _fmt(y.data[i]))
            row.extend(_fmt(v) for v in data.confounders[i])
            row.extend(_fmt(v) for v in data.surrogates[i])
            w.writerow(row)


def read_csv(path, bound_M: float = 1.0) -> SemiSupervisedDataset:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xcols = [j for j, h in enumerate(header) if h.startswith("X")]
    scols = [j for j, h in enumerate(header) if h.startswith("S")]
    ia, iy, ir = header.index("A"), header.index("Y"), header.index("R")
    r = np.array([int(b[ir]) for b in body])
    a = np.array([float(b[ia]) if b[ia] != "" else 0.0 for b in body])
    y = np.array([float(b[iy]) if b[iy] != "" else 0.0 for b in body])
    present = np.array([b[ia] != "" or b[iy] != "" for b in body])
    if np.any(present & (r == 0)) or np.any(~present & (r == 1)):
        raise ValueError("A/Y cells must be filled exactly on labeled rows")
    x = np.array([[float(b[j]) for j in xcols] for b in body]).reshape(len(body), len(xcols))
    s = np.array([[float(b[j]) for j in scols] for b in body]).reshape(len(body), len(scols))
    return make_dataset(r, a, y, x, s, bound_M=bound_M)
