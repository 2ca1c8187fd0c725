from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class FeatureMatrix:
    """Dense client x feature table. Missing cells are NaN."""

    client_ids: list[str]
    feature_names: list[str]
    values: np.ndarray
    provenance: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            self.values = self.values.reshape(len(self.client_ids), len(self.feature_names))
        if self.values.shape != (len(self.client_ids), len(self.feature_names)):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.client_ids)} clients x {len(self.feature_names)} features")
        if len(set(self.feature_names)) != len(self.feature_names):
            dup = sorted({n for n in self.feature_names if self.feature_names.count(n) > 1})
            raise ValueError(f"duplicate feature names: {dup[:5]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.feature_names.index(name)]

    def select(self, names: Sequence[str]) -> "FeatureMatrix":
        pos = {n: i for i, n in enumerate(self.feature_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise KeyError(f"features not in matrix: {missing[:5]}")
        idx = [pos[n] for n in names]
        return FeatureMatrix(list(self.client_ids), list(names), self.values[:, idx],
                             {n: self.provenance[n] for n in names if n in self.provenance})

    def take_rows(self, rows: Sequence[int] | np.ndarray) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return FeatureMatrix([self.client_ids[i] for i in rows], list(self.feature_names),
                             self.values[rows], dict(self.provenance))

    def reindex(self, client_ids: Sequence[str]) -> "FeatureMatrix":
        """Rows reordered to ``client_ids``; unknown clients get all-missing rows."""
        pos = {c: i for i, c in enumerate(self.client_ids)}
        out = np.full((len(client_ids), len(self.feature_names)), np.nan)
        for r, c in enumerate(client_ids):
            i = pos.get(c)
            if i is not None:
                out[r] = self.values[i]
        return FeatureMatrix(list(client_ids), list(self.feature_names), out, dict(self.provenance))


def hstack(parts: Sequence[FeatureMatrix]) -> FeatureMatrix:
    if not parts:
        raise ValueError("nothing to stack")
    ids = parts[0].client_ids
    for p in parts[1:]:
        if p.client_ids != ids:
            raise ValueError("feature blocks disagree on client order")
    names = [n for p in parts for n in p.feature_names]
    prov: dict[str, dict] = {}
    for p in parts:
        prov.update(p.provenance)
    values = np.hstack([p.values for p in parts]) if names else np.empty((len(ids), 0))
    return FeatureMatrix(list(ids), names, values, prov)


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_matrix(matrix: FeatureMatrix, path: str | Path, meta_path: str | Path | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", *matrix.feature_names])
        for cid, row in zip(matrix.client_ids, matrix.values):
            w.writerow([cid, *(_fmt(x) for x in row)])
    if meta_path is not None:
        with Path(meta_path).open("w", encoding="utf-8") as fh:
            json.dump({n: matrix.provenance.get(n, {}) for n in matrix.feature_names},
                      fh, indent=1, sort_keys=True)
            fh.write("\n")


def read_matrix(path: str | Path, meta_path: str | Path | None = None) -> FeatureMatrix:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "client_id":
            raise ValueError(f"{path}: first column must be client_id")
        ids, rows = [], []
        for row in reader:
            ids.append(row[0])
            rows.append([float(x) if x != "" else np.nan for x in row[1:]])
    values = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
    prov = {}
    if meta_path is not None and Path(meta_path).exists():
        with Path(meta_path).open(encoding="utf-8") as fh:
            prov = json.load(fh)
    return FeatureMatrix(ids, header[1:], values, prov)
