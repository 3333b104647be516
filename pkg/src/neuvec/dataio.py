"""Ingestion and preparation of float-based ocean profile observations.

Pipeline: ``ingest_csv`` -> ``subsample_per_float`` -> ``build_dataset``
-> ``build_application_plan``.  Years are treated as independent
realizations, so splitting and neighbor search happen within a year;
neighbors never come from the target's own float.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDataset, InsufficientNeighbors, MissingColumn, ParseError
from .sim import TrainingBatch
from .vecchia import build_plan

INPUTS = ("lon", "lat", "depth", "day_of_year")
FIELDS = ("float_id", "year") + INPUTS + ("response",)


@dataclass(frozen=True)
class ObservationRecord:
    float_id: str
    year: int
    lon: float
    lat: float
    depth: float
    day_of_year: float
    response: float

    @property
    def inputs(self):
        return (self.lon, self.lat, self.depth, self.day_of_year)


@dataclass
class Ingested:
    records: list
    skipped: int = 0
    skipped_rows: list = field(default_factory=list)


def ingest_csv(path, column_map=None, delimiter=","):
    """Parse a delimited file with a header row.

    ``column_map`` maps record fields (``float_id``, ``year``, ``lon``, ``lat``,
    ``depth``, ``day_of_year``, ``response``) to header names; unmapped
    fields use their own name.  Rows with empty, non-numeric or non-finite
    required values are skipped and counted; a row with the wrong number of
    fields is a ``ParseError``.
    """
    cmap = {f: f for f in FIELDS}
    cmap.update(column_map or {})
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: missing header row", row=1) from None
        pos = {}
        for f in FIELDS:
            if cmap[f] not in header:
                raise MissingColumn(f"column {cmap[f]!r} (for {f}) not in header")
            pos[f] = header.index(cmap[f])
        out = Ingested([])
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{rowno}: expected {len(header)} fields, got {len(row)}", row=rowno)
            rec = _parse_row(row, pos)
            if rec is None:
                out.skipped += 1
                out.skipped_rows.append(rowno)
            else:
                out.records.append(rec)
    return out


def _parse_row(row, pos):
    fid = row[pos["float_id"]].strip()
    if not fid:
        return None
    try:
        year_f = float(row[pos["year"]])
        vals = [float(row[pos[f]]) for f in INPUTS + ("response",)]
    except ValueError:
        return None
    if not (math.isfinite(year_f) and year_f == int(year_f)) or not all(math.isfinite(v) for v in vals):
        return None
    return ObservationRecord(fid, int(year_f), *vals)


def subsample_per_float(records, cap=200, rng=None):
    """Keep at most ``cap`` records per (year, float); original order is preserved."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    groups = defaultdict(list)
    for i, r in enumerate(records):
        groups[(r.year, r.float_id)].append(i)
    keep = []
    for key in sorted(groups):
        idx = groups[key]
        if len(idx) > cap:
            idx = [idx[j] for j in rng.choice(len(idx), cap, replace=False)]
        keep.extend(idx)
    return [records[i] for i in sorted(keep)]


@dataclass
class Dataset:
    """Normalized inputs, raw responses, and per-year train/test splits.

    Attributes
    ----------
    X : (n, 4) inputs scaled to [0, 1] with the stored bounds
    y : (n,) responses, unnormalized
    lo, hi : per-input bounds captured at build time
    splits : ``{year: (train_idx, test_idx)}``
    """

    records: list
    X: np.ndarray
    y: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    splits: dict
    skipped: int = 0

    @property
    def years(self):
        return np.array([r.year for r in self.records])

    @property
    def float_ids(self):
        return np.array([r.float_id for r in self.records])

    @property
    def train_idx(self):
        return np.sort(np.concatenate([tr for tr, _ in self.splits.values()]))

    @property
    def test_idx(self):
        return np.sort(np.concatenate([te for _, te in self.splits.values()]))

    def normalize(self, raw):
        return normalize(raw, self.lo, self.hi)

    def manifest(self):
        return {
            "n_records": len(self.records),
            "skipped": self.skipped,
            "inputs": list(INPUTS),
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "splits": {str(y): {"train": tr.tolist(), "test": te.tolist()}
                       for y, (tr, te) in sorted(self.splits.items())},
        }

    def write_manifest(self, path):
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def normalize(raw, lo, hi):
    """Min-max scaling; degenerate ranges map to 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (raw - lo) / safe, 0.5)


def build_dataset(records, split_fraction=0.8, rng=None, skipped=0):
    """Normalize inputs over all records and split each year at random.

    A year with ``n`` records contributes ``round(split_fraction * n)`` train
    points; the rest are test points.
    """
    if not records:
        raise EmptyDataset("no records to build a dataset from")
    raw = np.array([r.inputs for r in records], dtype=np.float64)
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    X = normalize(raw, lo, hi)
    y = np.array([r.response for r in records], dtype=np.float64)
    by_year = defaultdict(list)
    for i, r in enumerate(records):
        by_year[r.year].append(i)
    splits = {}
    for year in sorted(by_year):
        idx = np.array(by_year[year], dtype=np.int64)
        n_train = int(math.floor(split_fraction * len(idx) + 0.5))
        perm = idx[rng.permutation(len(idx))]
        splits[year] = (np.sort(perm[:n_train]), np.sort(perm[n_train:]))
    return Dataset(list(records), X, y, lo, hi, splits, skipped)


@dataclass
class YearPlan:
    """Conditioning plan over one year's observations.

    ``indices[k]`` is the dataset index of local observation ``k``; the plan
    orders training points first, then test points.
    """

    year: int
    indices: np.ndarray
    plan: object
    n_train: int

    def targets(self):
        """Plan positions of the test observations."""
        return np.arange(self.n_train, len(self.indices))


def build_application_plan(dataset, m=30, lengthscales=None, strict=False):
    """Per-year nearest-neighbor plans in lengthscale-scaled input space.

    Training points condition on earlier training points; test points
    condition on training points only.  Candidates from the target's own
    float are excluded.  Targets left without any eligible neighbor are
    listed in ``plan.flagged`` (or raise ``InsufficientNeighbors`` when
    ``strict``).
    """
    lengthscales = np.ones(dataset.X.shape[1]) if lengthscales is None else np.asarray(lengthscales, float)
    if np.any(lengthscales <= 0):
        raise ValueError("lengthscales must be positive")
    fids = dataset.float_ids
    plans = {}
    for year, (tr, te) in sorted(dataset.splits.items()):
        idx = np.concatenate([tr, te])
        X = dataset.X[idx]
        local_f = fids[idx]
        n_tr = len(tr)
        order = np.concatenate([_lex_order(X[:n_tr]), n_tr + _lex_order(X[n_tr:])])

        def eligible(target, cands, local_f=local_f, n_tr=n_tr):
            return (cands < n_tr) & (local_f[cands] != local_f[target])

        plan = build_plan(X, m, lengthscales, order=order, eligible=eligible, require=lambda k: True)
        if strict and plan.flagged:
            raise InsufficientNeighbors(f"year {year}: positions {plan.flagged} have no eligible neighbor")
        plans[year] = YearPlan(year, idx, plan, n_tr)
    return plans


def _lex_order(X):
    keys = [np.arange(len(X))] + [X[:, q] for q in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys).astype(np.int64)


def plan_groups(dataset, plans, m, test=False):
    """Collect fixed-size groups (``m`` neighbors + target) from year plans.

    Returns a ``TrainingBatch`` over all positions with exactly ``m``
    neighbors, restricted to test targets (``test=True``) or training ones.
    """
    locs, ys = [], []
    for yp in plans.values():
        plan = yp.plan
        positions = yp.targets() if test else np.arange(yp.n_train)
        for k in positions:
            c = plan.neighbors[k]
            if len(c) != m:
                continue
            obs = yp.indices[np.append(plan.order[c], plan.order[k])]
            locs.append(dataset.X[obs])
            ys.append(dataset.y[obs])
    if not locs:
        raise EmptyDataset(f"no {'test' if test else 'training'} targets with {m} neighbors")
    return TrainingBatch(np.array(locs), np.array(ys))
