"""Competing-risks cohorts with possibly missing causes of failure.

A cohort is stored column-wise (numpy arrays) because every downstream
computation is vectorised; :class:`Subject` is the row view used for
construction and inspection.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import InputError, ParseError, ValidationError

MISSING_TOKENS = {"", "NA"}


@dataclass(frozen=True)
class Subject:
    time: float
    status: int
    cause: Optional[int]
    observed_flag: int
    covariates: tuple
    auxiliaries: tuple = ()
    cluster: Optional[str] = None


@dataclass(frozen=True)
class Schema:
    """Column mapping for delimited input files.

    ``covariates``/``auxiliaries`` of ``None`` mean "auto-detect" columns named
    ``z1..zp`` / ``a1..aq``.
    """

    time: str = "time"
    status: str = "status"
    cause: str = "cause"
    observed: str = "observed"
    covariates: Optional[tuple] = None
    auxiliaries: Optional[tuple] = None
    cluster: Optional[str] = "cluster"

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object]) -> "Schema":
        kw = dict(mapping)
        for key in ("covariates", "auxiliaries"):
            if key in kw and kw[key] is not None:
                val = kw[key]
                if isinstance(val, str):
                    val = [v for v in re.split(r"[;|]", val) if v]
                kw[key] = tuple(val)
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**kw)


def _cause_to_float(cause, n):
    """Causes as floats with NaN for "absent" (None, NaN, empty, "NA", or 0)."""
    if cause is None:
        return np.full(n, np.nan)
    arr = np.asarray(cause)
    if arr.dtype.kind in "iuf":
        out = arr.astype(float).reshape(-1)
        return np.where(out == 0, np.nan, out)
    out = np.empty(arr.size)
    for i, c in enumerate(arr.reshape(-1)):
        if c is None or (isinstance(c, str) and c.strip() in MISSING_TOKENS):
            out[i] = np.nan
        else:
            try:
                out[i] = float(c)
            except (TypeError, ValueError):
                out[i] = -1.0  # rejected by validation
    return np.where(out == 0, np.nan, out)


def _numbered(header: Sequence[str], prefix: str) -> tuple:
    pat = re.compile(rf"^{prefix}(\d+)$")
    found = [(int(m.group(1)), h) for h in header if (m := pat.match(h))]
    return tuple(h for _, h in sorted(found))


class Cohort:
    """Validated, immutable competing-risks cohort.

    Arrays (all length n): ``time``, ``status`` (0/1), ``cause`` (1, 2, or 0
    when not observed), ``observed`` (R), ``Z`` (n x p), ``A`` (n x q) and
    optionally ``cluster`` (object array of ids).

    Derived, used by the estimating-equation code:

    * ``sort_index`` -- stable permutation ordering subjects by ascending time
    * ``weights`` -- 1, or 1/M_i for clustered cohorts
    * ``unit_index`` -- subject -> analysis unit (subject itself or cluster)
    * ``n_units`` -- n, or the number of clusters
    """

    def __init__(self, time, status, cause, observed, Z, A=None, cluster=None,
                 covariate_names=None, auxiliary_names=None):
        time = np.asarray(time, dtype=float).reshape(-1)
        n = time.shape[0]
        status = np.asarray(status).reshape(-1)
        observed = np.asarray(observed).reshape(-1)
        cause_f = _cause_to_float(cause, n)
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z.reshape(n, -1) if n else Z.reshape(0, 1)
        A = np.zeros((n, 0)) if A is None else np.asarray(A, dtype=float)
        if A.ndim == 1:
            A = A.reshape(n, -1)

        problems = []
        if n == 0:
            raise ValidationError("empty cohort")
        for name, arr in (("status", status), ("observed", observed), ("cause", cause_f)):
            if arr.shape[0] != n:
                raise ValidationError(f"length of {name} ({arr.shape[0]}) differs from time ({n})")
        if Z.shape[0] != n or A.shape[0] != n:
            raise ValidationError("covariate/auxiliary row count differs from time")
        if Z.shape[1] == 0:
            raise ValidationError("at least one covariate is required")

        def flag(mask, message):
            problems.extend((int(i), message) for i in np.flatnonzero(mask))

        has_cause = ~np.isnan(cause_f)
        with np.errstate(invalid="ignore"):
            flag(~np.isfinite(time) | (time < 0), "time must be finite and >= 0")
            flag(~np.isin(status, (0, 1)), "status must be 0 or 1")
            flag(~np.isin(observed, (0, 1)), "observed must be 0 or 1")
            flag(has_cause & ~np.isin(cause_f, (1.0, 2.0)), "cause must be 1 or 2")
        complete = (status == 1) & (observed == 1)
        flag(has_cause & ~complete, "cause present but status/observed are not both 1")
        flag(~has_cause & complete, "observed failure is missing its cause")
        flag((observed == 0) & (status != 1), "observed=0 requires status=1")
        flag((time == 0) & (status == 0), "censored at time 0 contributes nothing")
        cause_arr = np.where(has_cause & complete & np.isin(cause_f, (1.0, 2.0)), cause_f, 0).astype(np.int8)
        if not np.all(np.isfinite(Z)) or not np.all(np.isfinite(A)):
            bad = np.where(~(np.isfinite(Z).all(1) & np.isfinite(A).all(1)))[0]
            problems.extend((int(i), "non-finite covariate/auxiliary") for i in bad)

        if cluster is not None:
            cl = np.asarray(cluster, dtype=object).reshape(-1)
            missing = [i for i in range(n) if cl[i] is None or (isinstance(cl[i], str) and cl[i] in MISSING_TOKENS)
                       or (isinstance(cl[i], float) and math.isnan(cl[i]))]
            if len(missing) == n:
                cl = None
            elif missing:
                problems.extend((i, "cluster id missing while other rows carry one") for i in missing)
            if cl is not None:
                cl = np.array([str(c) for c in cl], dtype=object)
        else:
            cl = None
        if problems:
            problems.sort(key=lambda pr: pr[0])
            raise ValidationError("invalid cohort", problems)

        self.time = time
        self.status = status.astype(np.int8)
        self.observed = observed.astype(np.int8)
        self.cause = cause_arr
        self.Z = Z
        self.A = A
        self.cluster = cl
        self.covariate_names = tuple(covariate_names or (f"z{k + 1}" for k in range(Z.shape[1])))
        self.auxiliary_names = tuple(auxiliary_names or (f"a{k + 1}" for k in range(A.shape[1])))

        self.sort_index = np.argsort(time, kind="stable")
        ts = time[self.sort_index]
        # first/last sorted positions of each subject's tie group
        self._group_first = np.searchsorted(ts, ts, side="left")
        self._group_last = np.searchsorted(ts, ts, side="right") - 1

        if cl is not None:
            ids, inverse, counts = np.unique(cl, return_inverse=True, return_counts=True)
            self.cluster_ids = tuple(ids)
            self.cluster_sizes = {str(k): int(m) for k, m in zip(ids, counts)}
            self.unit_index = inverse.astype(np.intp)
            self.weights = 1.0 / counts[inverse]
            self.n_units = len(ids)
        else:
            self.cluster_ids = None
            self.cluster_sizes = None
            self.unit_index = np.arange(n, dtype=np.intp)
            self.weights = np.ones(n)
            self.n_units = n

        for arr in (self.time, self.status, self.observed, self.cause, self.Z, self.A,
                    self.sort_index, self.weights, self.unit_index):
            arr.setflags(write=False)

    # ------------------------------------------------------------------ views
    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    @property
    def q(self) -> int:
        return self.A.shape[1]

    @property
    def clustered(self) -> bool:
        return self.cluster is not None

    @property
    def delta(self) -> np.ndarray:
        """(n, 2) matrix of Delta_ij = I(Delta_i = 1, C_i = j); zero rows for missing causes."""
        return np.column_stack([self.cause == 1, self.cause == 2]).astype(float)

    @property
    def n_missing(self) -> int:
        return int(np.sum((1 - self.observed) * self.status))

    @property
    def subjects(self) -> tuple:
        return tuple(
            Subject(
                time=float(self.time[i]),
                status=int(self.status[i]),
                cause=int(self.cause[i]) if self.cause[i] else None,
                observed_flag=int(self.observed[i]),
                covariates=tuple(float(v) for v in self.Z[i]),
                auxiliaries=tuple(float(v) for v in self.A[i]),
                cluster=None if self.cluster is None else self.cluster[i],
            )
            for i in range(self.n)
        )

    def at_risk(self, t: float) -> np.ndarray:
        """Y_i(t) = I(X_i >= t), evaluated from the sort order."""
        ts = self.time[self.sort_index]
        k = np.searchsorted(ts, t, side="left")
        y = np.zeros(self.n, dtype=bool)
        y[self.sort_index[k:]] = True
        return y

    def __len__(self):
        return self.n

    def __repr__(self):
        return (f"Cohort(n={self.n}, p={self.p}, q={self.q}, failures={int(self.status.sum())}, "
                f"missing_causes={self.n_missing}, clusters={self.n_units if self.clustered else None})")

    # ----------------------------------------------------------- constructors
    @classmethod
    def from_subjects(cls, subjects: Sequence[Subject], **kw) -> "Cohort":
        subjects = list(subjects)
        if not subjects:
            raise ValidationError("empty cohort")
        p = {len(s.covariates) for s in subjects}
        q = {len(s.auxiliaries) for s in subjects}
        if len(p) != 1 or len(q) != 1:
            raise ValidationError("covariate and auxiliary vectors must have uniform length")
        (p,), (q,) = p, q
        clusters = [s.cluster for s in subjects]
        return cls(
            time=[s.time for s in subjects],
            status=[s.status for s in subjects],
            cause=[s.cause for s in subjects],
            observed=[s.observed_flag for s in subjects],
            Z=np.array([s.covariates for s in subjects], dtype=float).reshape(len(subjects), p),
            A=np.array([s.auxiliaries for s in subjects], dtype=float).reshape(len(subjects), q),
            cluster=None if all(c is None for c in clusters) else clusters,
            **kw,
        )


def design_rows(cohort: Cohort) -> np.ndarray:
    """W~ = (1, X, Z', A')' for every subject, in cohort order (n x (p+q+2))."""
    return np.column_stack([np.ones(cohort.n), cohort.time, cohort.Z, cohort.A])


def design_column_names(cohort: Cohort) -> tuple:
    return ("intercept", "time") + cohort.covariate_names + cohort.auxiliary_names


# ---------------------------------------------------------------------- I/O
def _parse_float(cell, row, col):
    try:
        return float(cell)
    except (TypeError, ValueError):
        raise ParseError(f"cannot parse {cell!r} as a number", row=row, column=col) from None


def _parse_int01(cell, row, col):
    v = _parse_float(cell, row, col)
    if v not in (0.0, 1.0):
        raise ParseError(f"expected 0 or 1, got {cell!r}", row=row, column=col)
    return int(v)


def load_cohort(path, schema: Optional[Schema] = None, delimiter: Optional[str] = None,
                use_cluster: bool = True) -> Cohort:
    """Read a delimited text file into a validated :class:`Cohort`.

    Row numbers in diagnostics are 1-based data rows (the header is row 0).
    """
    schema = schema or Schema()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if delimiter is None:
        first = text.splitlines()[0] if text else ""
        delimiter = "\t" if "\t" in first and "," not in first else ","
    reader = csv.reader(text.splitlines(), delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ValidationError("empty cohort") from None

    covs = schema.covariates if schema.covariates is not None else _numbered(header, "z")
    auxs = schema.auxiliaries if schema.auxiliaries is not None else _numbered(header, "a")
    required = [schema.time, schema.status, schema.cause, schema.observed, *covs, *auxs]
    missing_cols = [c for c in required if c not in header]
    if missing_cols:
        raise ParseError(f"missing columns {missing_cols}")
    if not covs:
        raise ParseError("no covariate columns found")
    col = {h: k for k, h in enumerate(header)}
    cluster_col = schema.cluster if (use_cluster and schema.cluster and schema.cluster in col) else None

    time, status, cause, observed, Z, A, cluster = [], [], [], [], [], [], []
    for r, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=r)
        row = [c.strip() for c in row]
        time.append(_parse_float(row[col[schema.time]], r, schema.time))
        status.append(_parse_int01(row[col[schema.status]], r, schema.status))
        observed.append(_parse_int01(row[col[schema.observed]], r, schema.observed))
        c = row[col[schema.cause]]
        if c in MISSING_TOKENS:
            cause.append(None)
        else:
            v = _parse_float(c, r, schema.cause)
            cause.append(int(v) if v.is_integer() else v)
        Z.append([_parse_float(row[col[h]], r, h) for h in covs])
        A.append([_parse_float(row[col[h]], r, h) for h in auxs])
        if cluster_col:
            cluster.append(row[col[cluster_col]])

    n = len(time)
    if n == 0:
        raise ValidationError("empty cohort")
    try:
        return Cohort(
            time, status, cause, observed,
            np.array(Z, dtype=float).reshape(n, len(covs)),
            np.array(A, dtype=float).reshape(n, len(auxs)),
            cluster=cluster if cluster_col else None,
            covariate_names=covs, auxiliary_names=auxs,
        )
    except ValidationError as exc:
        # shift to the 1-based data-row numbering used in the file
        raise ValidationError("invalid cohort", [(None if i is None else i + 1, m) for i, m in exc.problems]) from None


def export_cohort(cohort: Cohort, path) -> None:
    """Write ``cohort`` in the default schema; floats use ``repr`` so re-loading is bit-exact."""
    header = ["time", "status", "cause", "observed", *cohort.covariate_names, *cohort.auxiliary_names]
    if cohort.clustered:
        header.append("cluster")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(cohort.n):
            row = [repr(float(cohort.time[i])), int(cohort.status[i]),
                   int(cohort.cause[i]) if cohort.cause[i] else "NA", int(cohort.observed[i])]
            row += [repr(float(v)) for v in cohort.Z[i]]
            row += [repr(float(v)) for v in cohort.A[i]]
            if cohort.clustered:
                row.append(cohort.cluster[i])
            w.writerow(row)
