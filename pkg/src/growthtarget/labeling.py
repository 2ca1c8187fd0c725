"""Pre/post installation volume windows and multi-threshold growth labels."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .ingest import ClientRecord, DatasetBundle, TransactionRecord

logger = logging.getLogger(__name__)

WINDOW_MONTHS = 12
MIN_PRE_VOLUME = 0.01  # hl; below this the growth ratio is treated as undefined


@dataclass(frozen=True)
class GrowthThresholds:
    taus: tuple[float, ...] = (0.10, 0.30, 0.50)

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        if not taus:
            raise ValueError("at least one threshold is required")
        if any(t <= 0 for t in taus):
            raise ValueError("thresholds must be positive")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError("thresholds must be strictly increasing")
        object.__setattr__(self, "taus", taus)


def label_column(tau: float) -> str:
    return f"label_{round(tau * 100):d}"


@dataclass
class LabeledClient:
    client_id: str
    v_pre: float
    v_post: float
    growth: float | None
    labels: dict[float, int] = field(default_factory=dict)
    eligible: bool = True


def window_volumes(transactions: Iterable[TransactionRecord], client: ClientRecord,
                   window: int = WINDOW_MONTHS) -> tuple[float, float]:
    """Cumulative volume over the ``window`` months before and after installation.

    The installation month itself belongs to neither window.
    """
    install = client.install_month
    v_pre = v_post = 0.0
    for t in transactions:
        if t.client_id != client.client_id:
            continue
        offset = t.month - install
        if -window <= offset <= -1:
            v_pre += t.volume_hl
        elif 1 <= offset <= window:
            v_post += t.volume_hl
    return v_pre, v_post


def _windows_by_client(bundle: DatasetBundle, window: int) -> dict[str, tuple[float, float]]:
    install = {c.client_id: c.install_month for c in bundle.clients}
    sums: dict[str, list[float]] = defaultdict(lambda: [0.0, 0.0])
    for t in bundle.transactions:
        m0 = install.get(t.client_id)
        if m0 is None:
            continue
        offset = t.month - m0
        if -window <= offset <= -1:
            sums[t.client_id][0] += t.volume_hl
        elif 1 <= offset <= window:
            sums[t.client_id][1] += t.volume_hl
    return {c.client_id: tuple(sums.get(c.client_id, (0.0, 0.0))) for c in bundle.clients}


def label_from_volumes(client_id: str, v_pre: float, v_post: float,
                       thresholds: GrowthThresholds) -> LabeledClient:
    if v_pre < MIN_PRE_VOLUME:
        return LabeledClient(client_id, v_pre, v_post, None, {}, eligible=False)
    growth = (v_post - v_pre) / v_pre
    labels = {tau: int(growth >= tau) for tau in thresholds.taus}
    return LabeledClient(client_id, v_pre, v_post, growth, labels, eligible=True)


def label_clients(bundle: DatasetBundle, thresholds: GrowthThresholds | None = None,
                  window: int = WINDOW_MONTHS) -> list[LabeledClient]:
    thresholds = thresholds or GrowthThresholds()
    windows = _windows_by_client(bundle, window)
    out = [label_from_volumes(cid, vp, vq, thresholds) for cid, (vp, vq) in windows.items()]
    n_out = sum(not lc.eligible for lc in out)
    if n_out:
        logger.info("%d of %d clients ineligible (pre-window volume < %.2f hl)",
                    n_out, len(out), MIN_PRE_VOLUME)
    return out


def class_balance(labeled: Sequence[LabeledClient], tau: float) -> tuple[float, float]:
    eligible = [lc for lc in labeled if lc.eligible]
    if not eligible:
        raise ValueError("no eligible clients")
    pos = sum(_label_at(lc, tau) for lc in eligible)
    share1 = pos / len(eligible)
    return 1.0 - share1, share1


def _label_at(lc: LabeledClient, tau: float) -> int:
    for t, y in lc.labels.items():
        if math.isclose(t, tau, rel_tol=0, abs_tol=1e-12):
            return y
    raise KeyError(f"client {lc.client_id} has no label for threshold {tau}")


def labels_for(labeled: Sequence[LabeledClient], tau: float) -> tuple[list[str], list[int]]:
    """(client_ids, labels) of eligible clients at threshold ``tau``."""
    ids, ys = [], []
    for lc in labeled:
        if lc.eligible:
            ids.append(lc.client_id)
            ys.append(_label_at(lc, tau))
    return ids, ys


def write_labels(labeled: Sequence[LabeledClient], path: str | Path,
                 thresholds: GrowthThresholds | None = None) -> None:
    thresholds = thresholds or GrowthThresholds()
    cols = [label_column(t) for t in thresholds.taus]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "v_pre", "v_post", "growth", *cols, "eligible"])
        for lc in labeled:
            if lc.eligible:
                row = [lc.client_id, repr(lc.v_pre), repr(lc.v_post), repr(lc.growth),
                       *(lc.labels[t] for t in thresholds.taus), 1]
            else:
                row = [lc.client_id, repr(lc.v_pre), repr(lc.v_post), "",
                       *("" for _ in cols), 0]
            w.writerow(row)


def read_labels(path: str | Path) -> list[LabeledClient]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        label_cols = [c for c in reader.fieldnames or [] if c.startswith("label_")]
        out = []
        for row in reader:
            eligible = row["eligible"] == "1"
            labels = {int(c[len("label_"):]) / 100: int(row[c]) for c in label_cols} if eligible else {}
            out.append(LabeledClient(
                row["client_id"], float(row["v_pre"]), float(row["v_post"]),
                float(row["growth"]) if eligible else None, labels, eligible,
            ))
    return out
