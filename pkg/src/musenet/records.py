"""Irregular multivariate longitudinal records and their file format.

A record holds one subject's strictly increasing observation times, a
times x variables value matrix with some cells absent, and a binary label.
Missingness is carried as an explicit boolean index structure; the value
matrix uses NaN purely as a display marker and no logic branches on it.

On disk a dataset is newline-delimited JSON, one record per line:

    {"id": "...", "label": 0, "times": [...], "values": [[v|null, ...], ...]}

null marks an absent cell.  The format is streamable and diff-able, and a
write/read round trip reproduces the in-memory structure exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np


class RecordInvalid(ValueError):
    pass


@dataclass
class LongitudinalRecord:
    """One subject's irregular, partially observed multivariate series."""

    patient_id: str
    times: np.ndarray              # (T,) strictly increasing
    values: np.ndarray             # (T, M); NaN on unobserved cells
    label: int
    observed: np.ndarray           # (T, M) boolean, True where a value exists

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.times.ndim != 1 or self.values.ndim != 2:
            raise RecordInvalid("times must be 1-D and values 2-D")
        if self.values.shape[0] != self.times.shape[0]:
            raise RecordInvalid("values row count must match times length")
        if self.observed.shape != self.values.shape:
            raise RecordInvalid("observed mask shape must match values")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise RecordInvalid("times must be strictly increasing")
        if self.label not in (0, 1):
            raise RecordInvalid("label must be 0 or 1")
        if not np.all(np.isfinite(self.values[self.observed])):
            raise RecordInvalid("observed cells must hold finite values")

    @property
    def n_times(self) -> int:
        return self.times.shape[0]

    @property
    def n_variables(self) -> int:
        return self.values.shape[1]

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    def observed_index(self) -> list[tuple[int, int]]:
        """(timeIndex, variableIndex) pairs of observed cells."""
        t_idx, m_idx = np.nonzero(self.observed)
        return list(zip(t_idx.tolist(), m_idx.tolist()))

    def missing_index(self) -> list[tuple[int, int]]:
        t_idx, m_idx = np.nonzero(~self.observed)
        return list(zip(t_idx.tolist(), m_idx.tolist()))

    def missing_mask(self) -> np.ndarray:
        """0/1 matrix marking originally missing cells (1 = missing)."""
        return (~self.observed).astype(float)

    @classmethod
    def from_dense(cls, patient_id, times, values, label) -> "LongitudinalRecord":
        """Build a fully observed record from a dense value matrix."""
        values = np.asarray(values, dtype=float)
        return cls(patient_id=patient_id, times=times, values=values,
                   label=label, observed=np.ones_like(values, dtype=bool))


@dataclass
class ImputationResult:
    """Posterior-mean-completed values plus the missingness mask.

    Observed cells are copied from the source record bit-exactly; the mask
    is 1 exactly on the cells that were missing.
    """

    patient_id: str
    times: np.ndarray
    imputed: np.ndarray            # (T, M), fully populated
    mask: np.ndarray               # (T, M) 0/1, 1 where originally missing
    label: int

    def __post_init__(self):
        self.imputed = np.asarray(self.imputed, dtype=float)
        self.mask = np.asarray(self.mask, dtype=float)
        if not np.all(np.isfinite(self.imputed)):
            raise RecordInvalid("imputed values must be finite")


def record_to_json_dict(record: LongitudinalRecord) -> dict:
    rows = []
    for t in range(record.n_times):
        rows.append([
            float(record.values[t, m]) if record.observed[t, m] else None
            for m in range(record.n_variables)
        ])
    return {"id": record.patient_id, "label": int(record.label),
            "times": [float(v) for v in record.times], "values": rows}


def record_from_json_dict(doc: dict) -> LongitudinalRecord:
    times = np.asarray(doc["times"], dtype=float)
    raw = doc["values"]
    n_vars = len(raw[0]) if raw else 0
    values = np.full((len(raw), n_vars), np.nan)
    observed = np.zeros((len(raw), n_vars), dtype=bool)
    for t, row in enumerate(raw):
        if len(row) != n_vars:
            raise RecordInvalid("ragged value rows")
        for m, cell in enumerate(row):
            if cell is not None:
                values[t, m] = float(cell)
                observed[t, m] = True
    return LongitudinalRecord(patient_id=str(doc["id"]), times=times,
                              values=values, label=int(doc["label"]),
                              observed=observed)


def write_records(path, records: Iterable[LongitudinalRecord]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record_to_json_dict(record),
                                    separators=(",", ":")) + "\n")


def read_records(path) -> list[LongitudinalRecord]:
    return list(iter_records(path))


def iter_records(path) -> Iterator[LongitudinalRecord]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield record_from_json_dict(json.loads(line))


def write_imputed(path, results: Iterable[ImputationResult]) -> None:
    """Imputed dataset file: like the record file but dense, plus a mask."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for res in results:
            doc = {"id": res.patient_id, "label": int(res.label),
                   "times": [float(v) for v in res.times],
                   "values": [[float(v) for v in row] for row in res.imputed],
                   "mask": [[int(v) for v in row] for row in res.mask]}
            handle.write(json.dumps(doc, separators=(",", ":")) + "\n")


def read_imputed(path) -> list[ImputationResult]:
    out = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            out.append(ImputationResult(
                patient_id=str(doc["id"]),
                times=np.asarray(doc["times"], dtype=float),
                imputed=np.asarray(doc["values"], dtype=float),
                mask=np.asarray(doc["mask"], dtype=float),
                label=int(doc["label"])))
    return out
