"""File formats: long-format input CSV, tidy result tables and model.json."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import covariance as cov
from .core import CoefficientMatrix, DataError, KernelConfig, LongitudinalDataset, SubjectRecord, TimeGrid, clr_transform
from .estimator import FitResult
from .penalty import PenaltyConfig

MODEL_FORMAT = 1


def fmt(x) -> str:
    """17 significant digits, enough to round-trip a double."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def write_table(path, header, rows):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def read_table(path):
    """Header and rows of a UTF-8 CSV, each row paired with its line number."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, a header row is required") from None
        except csv.Error as exc:
            raise DataError(f"{path}:1: {exc}") from exc
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise DataError(f"{path}:1: duplicate column names in header")
        rows = []
        try:
            for row in reader:
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise DataError(
                        f"{path}:{reader.line_num}: expected {len(header)} fields, found {len(row)}"
                    )
                rows.append((reader.line_num, row))
        except csv.Error as exc:
            raise DataError(f"{path}:{reader.line_num}: {exc}") from exc
    return header, rows


def _number(text, path, line, column):
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: column {column!r} has non-numeric value {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}:{line}: column {column!r} has non-finite value {text!r}")
    return v


def _require(header, names, path):
    for name in names:
        if name not in header:
            raise DataError(f"{path}: unknown column {name!r}; available columns: {', '.join(header)}")


def read_counts_clr(path, subject: str, time: str, taxon: str, pseudocount: float = 0.5):
    """CLR-transformed abundance of ``taxon`` keyed by (subject, time).

    Every column other than the subject and time columns is treated as a
    count; the transform is taken across those columns within each row.
    """
    header, rows = read_table(path)
    _require(header, [subject, time, taxon], path)
    taxa = [c for c in header if c not in (subject, time)]
    keys, counts = [], []
    for line, row in rows:
        rec = dict(zip(header, row))
        keys.append((rec[subject].strip(), _number(rec[time], path, line, time)))
        vals = [_number(rec[c], path, line, c) for c in taxa]
        if any(v < 0 for v in vals):
            raise DataError(f"{path}:{line}: counts must be nonnegative")
        counts.append(vals)
    if len(set(keys)) != len(keys):
        raise DataError(f"{path}: duplicate (subject, time) rows")
    clr = clr_transform(np.array(counts, dtype=float), pseudocount)
    col = taxa.index(taxon)
    return {k: float(v) for k, v in zip(keys, clr[:, col])}


def read_long_csv(
    path,
    subject: str = "subject_id",
    time: str = "time",
    response: str = "response",
    covariates=None,
    add_intercept: bool = True,
    response_override: dict | None = None,
):
    """Long-format data, one row per observation.

    ``covariates`` defaults to every remaining column. With ``add_intercept``
    a constant column named ``intercept`` is prepended unless one is already
    present. Rows of a subject may come in any order.
    """
    header, rows = read_table(path)
    _require(header, [subject, time], path)
    if response_override is None:
        _require(header, [response], path)
    roles = {subject, time, response}
    if covariates is None:
        covariates = [c for c in header if c not in roles]
    covariates = list(covariates)
    _require(header, covariates, path)
    names = list(covariates)
    if add_intercept and "intercept" not in names:
        names = ["intercept"] + names
    if not names:
        raise DataError(f"{path}: no covariate columns")

    by_subject: dict[str, list] = {}
    for line, row in rows:
        rec = dict(zip(header, row))
        sid = rec[subject].strip()
        if not sid:
            raise DataError(f"{path}:{line}: empty subject id")
        t = _number(rec[time], path, line, time)
        if response_override is not None:
            try:
                y = response_override[(sid, t)]
            except KeyError:
                raise DataError(f"{path}:{line}: no counts row for subject {sid!r} at time {t!r}") from None
        else:
            y = _number(rec[response], path, line, response)
        x = [_number(rec[c], path, line, c) for c in covariates]
        if len(names) > len(covariates):
            x = [1.0] + x
        by_subject.setdefault(sid, []).append((t, y, x, line))

    if not by_subject:
        raise DataError(f"{path}: no observations")
    subjects = []
    for sid, obs in by_subject.items():
        obs.sort(key=lambda o: o[0])
        ts = [o[0] for o in obs]
        for a, b in zip(obs, obs[1:]):
            if a[0] == b[0]:
                raise DataError(f"{path}:{b[3]}: subject {sid!r} has two observations at time {b[0]!r}")
        subjects.append(
            SubjectRecord(sid, np.array(ts), np.array([o[1] for o in obs]), np.array([o[2] for o in obs]))
        )
    return LongitudinalDataset(tuple(subjects), tuple(names))


def write_long_csv(path, dataset: LongitudinalDataset, covariates=None):
    """Inverse of :func:`read_long_csv`; ``covariates`` selects which design columns to write."""
    names = list(dataset.covariate_names)
    keep = names if covariates is None else list(covariates)
    cols = [names.index(c) for c in keep]
    rows = []
    for s in dataset.subjects:
        for n in range(s.n_obs):
            rows.append([str(s.subject_id), s.times[n], s.responses[n]] + [s.design_rows[n, c] for c in cols])
    write_table(path, ["subject_id", "time", "response"] + keep, rows)


def coefficient_rows(B: CoefficientMatrix, names):
    for j, name in enumerate(names):
        for s, t in enumerate(B.grid.points):
            v = B.values[j, s]
            yield [name, t, v, v == 0]


def model_to_dict(fit: FitResult, names, extra: dict | None = None) -> dict:
    d = {
        "format": MODEL_FORMAT,
        "covariates": list(names),
        "grid": fit.grid.points.tolist(),
        "coefficients": fit.values.tolist(),
        "penalty_mask": fit.B.penalty_mask.tolist(),
        "kernel": {"scale": fit.kernel.scale, "family": fit.kernel.family, "truncation_radius": fit.kernel.truncation_radius},
        "variance": fit.params.to_dict(),
        "penalty": None if fit.penalty is None else fit.penalty.to_dict(),
        "loglik": fit.loglik,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "objective": fit.objective.tolist(),
    }
    if extra:
        d.update(extra)
    return d


def model_from_dict(d: dict):
    """FitResult and covariate names from :func:`model_to_dict` output."""
    try:
        if d.get("format") != MODEL_FORMAT:
            raise DataError(f"unsupported model format {d.get('format')!r}")
        grid = TimeGrid(np.array(d["grid"], dtype=float))
        B = CoefficientMatrix(np.array(d["coefficients"], dtype=float), grid, np.array(d["penalty_mask"], dtype=bool))
        k = d["kernel"]
        kernel = KernelConfig(float(k["scale"]), k["family"], float(k["truncation_radius"]))
        params = cov.VarianceParams.from_dict(d["variance"])
        penalty = None if d["penalty"] is None else PenaltyConfig.from_dict(d["penalty"])
        fit = FitResult(
            B, params, kernel, np.array(d["objective"], dtype=float), int(d["iterations"]), bool(d["converged"]),
            float(d["loglik"]), penalty,
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed model file: missing or invalid field {exc}") from exc
    return fit, list(d["covariates"])


def dump_json(path, d: dict):
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
