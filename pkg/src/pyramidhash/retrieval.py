"""Hamming ranking over packed binary codes and retrieval metrics.

Rankings sort by ascending Hamming distance and break ties by ascending
database index, so every metric here is deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ContractError
from .pyramid import BinaryCode, n_words, pack_bits, unpack_bits

PR_LEVELS = 101


@dataclass
class BinaryCodeSet:
    q: int
    codes: np.ndarray  # (count, ceil(q/64)) uint64
    labels: np.ndarray  # (count,) int64

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint64).reshape(-1, n_words(self.q))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.codes):
            raise ContractError(f"{len(self.codes)} codes but {len(self.labels)} labels")
        if np.any(self.labels < 0):
            raise ContractError("labels must be nonnegative")
        pad = n_words(self.q) * 64 - self.q
        if pad and len(self.codes) and np.any(self.codes[:, -1] >> np.uint64(64 - pad)):
            raise ContractError("padding bits beyond q must be zero")

    @property
    def count(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> BinaryCode:
        return BinaryCode(self.q, self.codes[i].copy())

    @classmethod
    def from_bits(cls, bits, labels) -> "BinaryCodeSet":
        bits = np.asarray(bits)
        return cls(bits.shape[-1], pack_bits(bits), labels)

    @classmethod
    def from_codes(cls, codes: Sequence[BinaryCode], labels) -> "BinaryCodeSet":
        if not codes:
            raise ContractError("cannot infer q from an empty code list")
        q = codes[0].q
        if any(c.q != q for c in codes):
            raise ContractError("all codes in a set must share q")
        return cls(q, np.stack([c.bits for c in codes]), labels)

    def append(self, code: BinaryCode, label: int) -> "BinaryCodeSet":
        if code.q != self.q:
            raise ContractError(f"cannot append a {code.q}-bit code to a {self.q}-bit set")
        return BinaryCodeSet(self.q, np.vstack([self.codes, code.bits[None]]), np.append(self.labels, label))

    def to_bits(self) -> np.ndarray:
        return unpack_bits(self.codes, self.q)


def hamming_distance(a: BinaryCode, b: BinaryCode) -> int:
    if a.q != b.q:
        raise ContractError(f"code lengths differ: {a.q} vs {b.q}")
    return int(kernels.hamming_matrix(a.bits[None], b.bits[None])[0, 0])


def distance_matrix(queries: BinaryCodeSet, db: BinaryCodeSet) -> np.ndarray:
    if queries.q != db.q:
        raise ContractError(f"query codes are {queries.q}-bit but database codes are {db.q}-bit")
    return kernels.hamming_matrix(queries.codes, db.codes)


@dataclass
class RankedResult:
    query: int
    order: np.ndarray  # database indices
    distances: np.ndarray  # aligned with order

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.order.tolist(), self.distances.tolist()))


def _rank_rows(dist: np.ndarray) -> np.ndarray:
    return np.argsort(dist, axis=-1, kind="stable")


def rank_database(query: BinaryCode, db: BinaryCodeSet, query_index: int = 0) -> RankedResult:
    if db.count == 0:
        raise ContractError("cannot rank an empty database")
    if query.q != db.q:
        raise ContractError(f"query is {query.q}-bit but database is {db.q}-bit")
    dist = kernels.hamming_matrix(query.bits[None], db.codes)[0]
    order = _rank_rows(dist)
    return RankedResult(query_index, order, dist[order])


def relevance_matrix(queries: BinaryCodeSet, db: BinaryCodeSet) -> tuple[np.ndarray, np.ndarray]:
    """Relevance flags in ranked order per query, plus the sorted distances."""
    if db.count == 0:
        raise ContractError("database is empty")
    dist = distance_matrix(queries, db)
    order = _rank_rows(dist)
    rel = db.labels[order] == queries.labels[:, None]
    return rel, np.take_along_axis(dist, order, axis=1)


def _ap_fraction(relevance: np.ndarray) -> Fraction:
    """Exact AP of one ranked 0/1 relevance row (0 when nothing is relevant)."""
    ranks = np.flatnonzero(relevance) + 1
    if len(ranks) == 0:
        return Fraction(0)
    # sum_j j / rank_j over a common denominator, all in integers
    denom = math.lcm(*ranks.tolist())
    num = sum(j * (denom // int(k)) for j, k in enumerate(ranks, start=1))
    return Fraction(num, denom * len(ranks))


def average_precision(relevance: Sequence[int], n_plus: int) -> float:
    """AP over a complete ranking given 0/1 relevance flags in ranked order.

    Computed exactly and rounded once. Returns 0.0 when the query has no
    relevant items.
    """
    rel = np.asarray(relevance, dtype=bool)
    if n_plus <= 0:
        return 0.0
    if int(rel.sum()) != n_plus:
        raise ContractError(f"n_plus={n_plus} but the ranking holds {int(rel.sum())} relevant items")
    return float(_ap_fraction(rel))


def _check_queries(queries: BinaryCodeSet) -> None:
    if queries.count == 0:
        raise ContractError("at least one query is required")


def _mean(values: Sequence[Fraction]) -> float:
    return float(sum(values, Fraction(0)) / len(values))


def mean_average_precision(queries: BinaryCodeSet, db: BinaryCodeSet) -> float:
    """Mean of the per-query APs, exact up to the final rounding."""
    _check_queries(queries)
    rel, _ = relevance_matrix(queries, db)
    return _mean([_ap_fraction(r) for r in rel])


def precision_within_radius(queries: BinaryCodeSet, db: BinaryCodeSet, r: int = 3, *, skip_empty: bool = False) -> float:
    """Mean precision of the items within Hamming distance ``r`` of each query.

    A query that retrieves nothing contributes 0, or is left out of the mean
    when ``skip_empty`` is set.
    """
    _check_queries(queries)
    if not 0 <= r <= db.q:
        raise ContractError(f"radius must lie in [0, {db.q}], got {r}")
    dist = distance_matrix(queries, db)
    relevant = db.labels[None, :] == queries.labels[:, None]
    inside = dist <= r
    retrieved = inside.sum(axis=1).tolist()
    hits = (inside & relevant).sum(axis=1).tolist()
    prec = [Fraction(h, n) for h, n in zip(hits, retrieved) if n > 0]
    if not skip_empty:
        prec += [Fraction(0)] * (len(hits) - len(prec))
    return _mean(prec) if prec else 0.0


def precision_at_topN(queries: BinaryCodeSet, db: BinaryCodeSet, ns: Sequence[int]) -> list[tuple[int, float]]:
    """Mean precision of the first N ranked items, for each N in ``ns``."""
    _check_queries(queries)
    for n in ns:
        if not 1 <= n <= db.count:
            raise ContractError(f"N must lie in [1, {db.count}], got {n}")
    rel, _ = relevance_matrix(queries, db)
    hits = np.cumsum(rel, axis=1)
    return [(int(n), float(Fraction(int(hits[:, n - 1].sum()), n * queries.count))) for n in ns]


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    excluded: int = 0

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def interpolated_precision(relevance: Sequence[int], levels: int = PR_LEVELS) -> np.ndarray:
    """Max-to-the-right interpolated precision at recall i/(levels-1).

    Recall thresholds are compared in integer arithmetic so level 1.0 is
    reached exactly when the last relevant item is retrieved.
    """
    rel = np.asarray(relevance, dtype=bool)
    n_plus = int(rel.sum())
    if n_plus == 0:
        raise ContractError("interpolated precision needs at least one relevant item")
    hits = np.cumsum(rel)
    prec = hits / np.arange(1, len(rel) + 1)
    # best precision at or after each rank
    suffix_max = np.maximum.accumulate(prec[::-1])[::-1]
    steps = levels - 1
    out = np.empty(levels)
    for i in range(levels):
        # first rank whose recall hits/n_plus >= i/steps
        k = int(np.argmax(hits * steps >= i * n_plus))
        out[i] = suffix_max[k]
    return out


def pr_curve(queries: BinaryCodeSet, db: BinaryCodeSet, levels: int = PR_LEVELS) -> PRCurve:
    """101-point interpolated precision-recall curve averaged over queries.

    Queries without any relevant database item are excluded and counted.
    """
    _check_queries(queries)
    rel, _ = relevance_matrix(queries, db)
    curves = [interpolated_precision(r, levels) for r in rel if r.any()]
    excluded = len(rel) - len(curves)
    recall = np.linspace(0.0, 1.0, levels)
    if not curves:
        return PRCurve(recall, np.zeros(levels), excluded)
    return PRCurve(recall, np.mean(curves, axis=0), excluded)


DEFAULT_TOPN = (1, 5, 10, 20, 50, 100)


@dataclass
class MetricReport:
    map: float
    precision_at_radius: float
    radius: int
    pr_curve: PRCurve
    topn_curve: list[tuple[int, float]] = field(default_factory=list)


def evaluate(queries: BinaryCodeSet, db: BinaryCodeSet, radius: int = 3, ns: Sequence[int] | None = None) -> MetricReport:
    if ns is None:
        ns = [n for n in DEFAULT_TOPN if n <= db.count] or [db.count]
    return MetricReport(
        map=mean_average_precision(queries, db),
        precision_at_radius=precision_within_radius(queries, db, radius),
        radius=radius,
        pr_curve=pr_curve(queries, db),
        topn_curve=precision_at_topN(queries, db, ns),
    )


def write_report(report: MetricReport, out_dir, radius_rows: Sequence[tuple[int, float]] | None = None) -> None:
    """Write map.csv, pr_curve.csv, topn.csv and radius.csv into ``out_dir``."""
    import csv
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def dump(name, header, rows):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)

    dump("map.csv", ["map"], [[repr(report.map)]])
    dump("pr_curve.csv", ["recall", "precision"], [[repr(r), repr(p)] for r, p in report.pr_curve.points()])
    dump("topn.csv", ["N", "precision"], [[n, repr(p)] for n, p in report.topn_curve])
    rows = radius_rows if radius_rows is not None else [(report.radius, report.precision_at_radius)]
    dump("radius.csv", ["r", "precision"], [[r, repr(p)] for r, p in rows])
