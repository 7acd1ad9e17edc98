"""Ranking metrics: R_n@k, MAP, MRR, P@1.

Candidates are ordered by descending score; equal scores keep ascending
candidate index. Instances without a positive are skipped and counted.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import MetricError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankingInstance:
    context_id: str
    scores: tuple
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        object.__setattr__(self, "labels", tuple(int(y) for y in self.labels))
        if not self.scores:
            raise MetricError(f"{self.context_id}: no candidates")
        if len(self.scores) != len(self.labels):
            raise MetricError(f"{self.context_id}: {len(self.scores)} scores vs {len(self.labels)} labels")

    def order(self):
        """Candidate indices best-first."""
        s = np.asarray(self.scores)
        return np.lexsort((np.arange(len(s)), -s))

    def ranked_labels(self):
        return np.asarray(self.labels)[self.order()]


def _usable(instances):
    kept = [inst for inst in instances if any(inst.labels)]
    skipped = len(instances) - len(kept)
    if skipped:
        log.warning("skipped %d instance(s) without a positive candidate", skipped)
    return kept


def _average(values):
    # exactly rounded, so the result does not depend on summation order
    return math.fsum(values) / len(values) if values else 0.0


def recall_at_k(instances, n, k):
    for inst in instances:
        if len(inst.scores) != n:
            raise MetricError(f"{inst.context_id}: expected {n} candidates, got {len(inst.scores)}")
    return _average([float(inst.ranked_labels()[:k].any()) for inst in _usable(instances)])


def average_precision(ranked):
    hits = np.flatnonzero(ranked) + 1
    return _average([float(i) / float(pos) for i, pos in enumerate(hits, start=1)])


def mean_average_precision(instances):
    return _average([average_precision(inst.ranked_labels()) for inst in _usable(instances)])


def mrr(instances):
    return _average([1.0 / (np.flatnonzero(inst.ranked_labels())[0] + 1) for inst in _usable(instances)])


def p_at_1(instances):
    return _average([float(inst.ranked_labels()[0]) for inst in _usable(instances)])


map_ = mean_average_precision


def parse_metric(name, n):
    """'r@2' -> ('R_4@2', fn). Names: r@k, map, mrr, p@1."""
    key = name.strip().lower()
    if key.startswith("r@"):
        k = int(key[2:])
        return f"R_{n}@{k}", lambda inst: recall_at_k(inst, n, k)
    table = {"map": ("MAP", mean_average_precision), "mrr": ("MRR", mrr), "p@1": ("P@1", p_at_1)}
    if key not in table:
        raise MetricError(f"unknown metric {name!r}")
    return table[key]


def compute(instances, names, n=None):
    if n is None:
        n = len(instances[0].scores) if instances else 0
    out = {}
    for name in names:
        label, fn = parse_metric(name, n)
        out[label] = fn(instances)
    return out
