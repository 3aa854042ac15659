"""Plan-quality metrics relative to the DP baseline, per-template grouping and template k-fold splits."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class EvalRecord:
    qid: str
    template: str
    agent_cost: float
    dp_cost: float
    agent_latency: float | None = None
    dp_latency: float | None = None

    def __post_init__(self) -> None:
        for name in ("agent_cost", "dp_cost", "agent_latency", "dp_latency"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")

    def to_dict(self) -> dict:
        return {
            "qid": self.qid, "template": self.template, "agent_cost": self.agent_cost, "dp_cost": self.dp_cost,
            "agent_latency": self.agent_latency, "dp_latency": self.dp_latency,
        }


def mrc(records: Sequence[EvalRecord]) -> float:
    """Arithmetic mean of agent cost over DP cost."""
    if not records:
        raise ValueError("mrc of an empty record set")
    return float(np.mean([r.agent_cost / r.dp_cost for r in records]))


def gmrl(records: Sequence[EvalRecord]) -> float:
    """Geometric mean of agent latency over DP latency, accumulated in log space."""
    if not records:
        raise ValueError("gmrl of an empty record set")
    logs = []
    for r in records:
        if r.agent_latency is None or r.dp_latency is None:
            raise ValueError(f"record {r.qid} has no latency")
        logs.append(math.log(r.agent_latency) - math.log(r.dp_latency))
    return math.exp(math.fsum(logs) / len(logs))


def _has_latency(records: Iterable[EvalRecord]) -> bool:
    return all(r.agent_latency is not None and r.dp_latency is not None for r in records)


def per_template(records: Sequence[EvalRecord]) -> dict[str, tuple[float, float | None]]:
    groups: dict[str, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(r.template, []).append(r)
    return {
        t: (mrc(rs), gmrl(rs) if _has_latency(rs) else None)
        for t, rs in sorted(groups.items())
    }


def kfold_splits(workload: Sequence, k: int, seed: int | None = None) -> list[tuple[list, list]]:
    """Partition templates (not queries) into k folds; each fold's queries form one test set.

    Templates are dealt round-robin in sorted order, or after a seeded shuffle.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    templates = sorted({q.template for q in workload})
    if len(templates) < k:
        raise ValueError(f"{len(templates)} templates cannot fill {k} folds")
    if seed is not None:
        templates = [templates[i] for i in np.random.default_rng(seed).permutation(len(templates))]
    folds = [set(templates[f::k]) for f in range(k)]
    return [
        ([q for q in workload if q.template not in fold], [q for q in workload if q.template in fold])
        for fold in folds
    ]


def summary(records: Sequence[EvalRecord]) -> dict:
    lat = _has_latency(records)
    groups = per_template(records)
    counts: dict[str, int] = {}
    for r in records:
        counts[r.template] = counts.get(r.template, 0) + 1
    return {
        "mrc": mrc(records),
        "gmrl": gmrl(records) if lat else None,
        "n_queries": len(records),
        "per_template": {
            t: {"mrc": m, "gmrl": g, "n_queries": counts[t]} for t, (m, g) in groups.items()
        },
    }


def report_csv(records: Sequence[EvalRecord]) -> str:
    """Rows ``template,metric,value,n_queries``; the global row uses template ``ALL``."""
    s = summary(records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["template", "metric", "value", "n_queries"])
    rows = [("ALL", s["mrc"], s["gmrl"], s["n_queries"])]
    rows += [(t, g["mrc"], g["gmrl"], g["n_queries"]) for t, g in s["per_template"].items()]
    for template, m, g, n in rows:
        w.writerow([template, "mrc", repr(m), n])
        if g is not None:
            w.writerow([template, "gmrl", repr(g), n])
    return buf.getvalue()


def report_json(records: Sequence[EvalRecord]) -> str:
    return json.dumps(summary(records), sort_keys=True, indent=1)
