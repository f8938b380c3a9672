"""Rank statistics and the four evaluation-protocol drivers.

Conventions are pinned here once: fractional ranks average ties, Kendall's
tau is the tie-corrected tau-b, Kendall's W carries the tie correction
term, quantiles use the inclusive linear-interpolation method, and
correlations of constant inputs are errors rather than silent NaNs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import ParameterError, SchemaError, UndefinedStatisticError

QUANTILE_METHOD = "inclusive-linear"


def fractional_ranks(values) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ParameterError(f"inputs must be equal-length vectors, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ParameterError(f"need n >= 2 values, got {len(a)}")
    return a, b


def spearman(a, b) -> float:
    """Pearson correlation of tie-averaged ranks."""
    a, b = _check_pair(a, b)
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedStatisticError("spearman is undefined for constant input")
    ra = fractional_ranks(a)
    rb = fractional_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(np.sum(ra**2) * np.sum(rb**2)))
    if denom == 0.0:
        raise UndefinedStatisticError("spearman is undefined for constant ranks")
    return float(np.sum(ra * rb) / denom)


def kendall_tau(a, b) -> float:
    """Tie-corrected Kendall's tau (tau-b) over all pairs."""
    a, b = _check_pair(a, b)
    n = len(a)
    concordant = discordant = 0
    ties_a = ties_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            da = a[i] - a[j]
            db = b[i] - b[j]
            if da == 0 and db == 0:
                ties_a += 1
                ties_b += 1
            elif da == 0:
                ties_a += 1
            elif db == 0:
                ties_b += 1
            elif (da > 0) == (db > 0):
                concordant += 1
            else:
                discordant += 1
    n0 = n * (n - 1) // 2
    if ties_a == n0 or ties_b == n0:
        raise UndefinedStatisticError("kendall tau is undefined when all pairs are tied")
    denom = math.sqrt((n0 - ties_a) * (n0 - ties_b))
    return float((concordant - discordant) / denom)


def kendall_w(rankings) -> float:
    """Coefficient of concordance across m judges' scores of n items.

    Scores are converted to tie-averaged ranks per judge; the denominator
    carries the standard tie correction sum(t^3 - t) per judge.
    """
    rows = [np.asarray(r, dtype=np.float64) for r in rankings]
    if len(rows) < 2:
        raise ParameterError(f"need m >= 2 judges, got {len(rows)}")
    n = len(rows[0])
    if n < 2:
        raise ParameterError(f"need n >= 2 items, got {n}")
    for r in rows:
        if len(r) != n:
            raise ParameterError("all judges must score the same item count")
    m = len(rows)
    ranks = np.stack([fractional_ranks(r) for r in rows])
    rank_sums = ranks.sum(axis=0)
    s = float(np.sum((rank_sums - rank_sums.mean()) ** 2))
    tie_term = 0.0
    for r in rows:
        _, counts = np.unique(r, return_counts=True)
        tie_term += float(np.sum(counts**3 - counts))
    denom = m * m * (n**3 - n) - m * tie_term
    if denom <= 0:
        raise UndefinedStatisticError("kendall w is undefined: all judges fully tied")
    return float(12.0 * s / denom)


def iqr(values) -> float:
    """Q3 - Q1 with inclusive linear-interpolation quantiles."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or len(v) < 1:
        raise ParameterError("iqr needs a nonempty vector")
    q1, q3 = np.quantile(v, [0.25, 0.75])
    return float(q3 - q1)


def wilson_ci(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n < 1 or not 0 <= successes <= n:
        raise ParameterError(f"invalid counts: {successes}/{n}")
    if not 0 < level < 1:
        raise ParameterError(f"level must be in (0,1), got {level}")
    z = float(ndtri(0.5 + level / 2.0))
    phat = successes / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == n else min(1.0, center + half)
    return (lo, hi)


def binomial_test_two_sided(successes: int, n: int, p0: float) -> float:
    """Exact two-sided binomial p-value: total probability of outcomes no
    more likely than the observed one, computed in log space."""
    if n < 1 or not 0 <= successes <= n:
        raise ParameterError(f"invalid counts: {successes}/{n}")
    if not 0 < p0 < 1:
        raise ParameterError(f"p0 must be in (0,1), got {p0}")
    k = np.arange(n + 1)
    logpmf = (
        _log_comb(n, k) + k * math.log(p0) + (n - k) * math.log1p(-p0)
    )
    cutoff = logpmf[successes] + 1e-7
    selected = logpmf[logpmf <= cutoff]
    m = selected.max()
    p = math.exp(m) * float(np.sum(np.exp(selected - m)))
    return min(1.0, p)


def _log_comb(n: int, k: np.ndarray) -> np.ndarray:
    lg = math.lgamma
    return np.array([lg(n + 1) - lg(int(ki) + 1) - lg(n - int(ki) + 1) for ki in k])


@dataclass(frozen=True)
class ProtocolReport:
    protocol: str
    per_condition: tuple[dict, ...]
    aggregate: dict
    provenance: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "per_condition": list(self.per_condition),
            "aggregate": self.aggregate,
            "provenance": self.provenance,
        }

    def to_markdown(self) -> str:
        lines = [f"# Protocol report: {self.protocol}", ""]
        lines.append(f"Quantile method: {QUANTILE_METHOD}.")
        for key, val in sorted(self.provenance.items()):
            lines.append(f"- {key}: {val}")
        lines.append("")
        if self.per_condition:
            cols = list(self.per_condition[0].keys())
            lines.append("| " + " | ".join(cols) + " |")
            lines.append("|" + "---|" * len(cols))
            for row in self.per_condition:
                lines.append("| " + " | ".join(_fmt(row[c]) for c in cols) + " |")
            lines.append("")
        lines.append("## Aggregate")
        for key, val in self.aggregate.items():
            lines.append(f"- {key}: {_fmt(val)}")
        lines.append("")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _read_csv(path: str, required: tuple[str, ...], numeric: tuple[str, ...]) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            parsed = dict(row)
            for col in numeric:
                try:
                    parsed[col] = float(row[col])
                except (TypeError, ValueError):
                    raise SchemaError(
                        f"{path}:{lineno}: column {col!r} is not numeric ({row.get(col)!r})"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return rows


def _metric_column(path: str, rows: list[dict]) -> str:
    for cand in ("metric_value", "nrq"):
        if cand in rows[0]:
            return cand
    raise SchemaError(f"{path}: need a 'metric_value' or 'nrq' column")


def _protocol_task_anchor(inputs: dict) -> tuple[tuple[dict, ...], dict]:
    paths = inputs["csvs"]
    conditions = []
    for path in paths:
        rows = _read_csv(
            path,
            required=("image_id", "distortion", "theta", "metric_value", "anchor_damage"),
            numeric=("theta", "metric_value", "anchor_damage"),
        )
        anchors: dict[str, list[dict]] = {}
        for r in rows:
            anchors.setdefault(r.get("anchor") or _stem(path), []).append(r)
        for anchor, arows in sorted(anchors.items()):
            metric = [r["metric_value"] for r in arows]
            damage = [r["anchor_damage"] for r in arows]
            conditions.append(
                {
                    "anchor": anchor,
                    "n": len(arows),
                    "spearman_rho": spearman(metric, damage),
                    "kendall_tau": kendall_tau(metric, damage),
                }
            )
    aggregate = {
        "mean_spearman_rho": float(np.mean([c["spearman_rho"] for c in conditions])),
        "mean_kendall_tau": float(np.mean([c["kendall_tau"] for c in conditions])),
        "anchors": len(conditions),
    }
    return tuple(conditions), aggregate


def _protocol_cross_organ(inputs: dict) -> tuple[tuple[dict, ...], dict]:
    path = inputs["csv"]
    rows = _read_csv(path, required=("organ", "distortion"), numeric=())
    col = _metric_column(path, rows)
    for i, r in enumerate(rows, start=2):
        try:
            r[col] = float(r[col])
        except (TypeError, ValueError):
            raise SchemaError(f"{path}:{i}: column {col!r} is not numeric") from None

    per: dict[str, dict[str, list[float]]] = {}
    for r in rows:
        per.setdefault(r["organ"], {}).setdefault(r["distortion"], []).append(r[col])
    organs = sorted(per)
    common = sorted(set.intersection(*(set(per[o]) for o in organs)))
    if len(common) < 2:
        raise SchemaError(f"{path}: organs share fewer than 2 distortions")
    mean_scores = {
        o: [float(np.mean(per[o][k])) for k in common] for o in organs
    }
    w = kendall_w([mean_scores[o] for o in organs])
    conditions = []
    for i, kind in enumerate(common):
        across = [mean_scores[o][i] for o in organs]
        conditions.append({"distortion": kind, "iqr_across_organs": iqr(across)})
    aggregate = {
        "kendall_w": w,
        "organs": len(organs),
        "distortions": len(common),
        "mean_iqr": float(np.mean([c["iqr_across_organs"] for c in conditions])),
    }
    return tuple(conditions), aggregate


def _protocol_nr_monotonicity(inputs: dict) -> tuple[tuple[dict, ...], dict]:
    path = inputs["csv"]
    rows = _read_csv(
        path,
        required=("image_id", "organ", "distortion", "severity_rank", "nrq"),
        numeric=("severity_rank", "nrq"),
    )
    per: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        per.setdefault((r["organ"], r["distortion"]), []).append(r)
    conditions = []
    for (organ, kind), group in sorted(per.items()):
        severity = [r["severity_rank"] for r in group]
        scores = [r["nrq"] for r in group]
        try:
            rho = spearman(scores, severity)
        except UndefinedStatisticError as exc:
            raise UndefinedStatisticError(
                f"condition ({organ}, {kind}): {exc}"
            ) from exc
        conditions.append(
            {
                "organ": organ,
                "distortion": kind,
                "n": len(group),
                "spearman_rho": rho,
                "agreement": -rho,  # quality score falls as severity rises
            }
        )
    aggregate = {
        "mean_spearman_rho": float(np.mean([c["spearman_rho"] for c in conditions])),
        "mean_agreement": float(np.mean([c["agreement"] for c in conditions])),
        "conditions": len(conditions),
    }
    return tuple(conditions), aggregate


def _protocol_afc_agreement(inputs: dict) -> tuple[tuple[dict, ...], dict]:
    from .study import analyze_agreement

    report = analyze_agreement(
        responses_path=inputs["responses"],
        pairs_path=inputs["pairs"],
        nrq_scores_path=inputs["nrq"],
    )
    conditions = tuple(report.pop("per_class"))
    return conditions, report


_PROTOCOLS = {
    "task-anchor": _protocol_task_anchor,
    "cross-organ": _protocol_cross_organ,
    "nr-monotonicity": _protocol_nr_monotonicity,
    "afc-agreement": _protocol_afc_agreement,
}


def run_protocol(kind: str, inputs: dict, cfg: dict | None = None) -> ProtocolReport:
    """Run one evaluation protocol over schema-validated input files."""
    if kind not in _PROTOCOLS:
        raise ParameterError(f"unknown protocol {kind!r}; have {sorted(_PROTOCOLS)}")
    conditions, aggregate = _PROTOCOLS[kind](inputs)
    provenance = {
        "inputs": json.dumps(inputs, sort_keys=True),
        "quantile_method": QUANTILE_METHOD,
    }
    if cfg:
        provenance.update({str(k): str(v) for k, v in cfg.items()})
    return ProtocolReport(
        protocol=kind, per_condition=conditions, aggregate=aggregate, provenance=provenance
    )


def _stem(path: str) -> str:
    import os

    return os.path.splitext(os.path.basename(path))[0]
