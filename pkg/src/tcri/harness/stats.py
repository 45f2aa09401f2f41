"""Per-domain accuracy summaries in the mean / std / min layout of the result tables."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass


@dataclass
class DomainStats:
    per_domain: dict[str, tuple[float, float]]
    mean: float
    std: float
    min: float
    trials: dict[str, int] | None = None

    def domain_means(self) -> list[float]:
        return [m for m, _ in self.per_domain.values()]


def _sample_std(values) -> float:
    # statistics.stdev is exact for equal values, where numpy leaves round-off
    v = [float(x) for x in values]
    return statistics.stdev(v) if len(v) > 1 else 0.0


def report_stats(results: dict[str, list[float]]) -> DomainStats:
    """``results`` maps domain_id to per-trial accuracies (as fractions).

    Standard deviations use the n-1 denominator, both across trials and across
    domain means.
    """
    if not results or any(len(v) == 0 for v in results.values()):
        raise ValueError("report_stats needs at least one result per domain")
    per = {d: (math.fsum(v) / len(v), _sample_std(v)) for d, v in results.items()}
    means = [m for m, _ in per.values()]
    return DomainStats(
        per,
        math.fsum(means) / len(means),
        _sample_std(means),
        min(means),
        {d: len(v) for d, v in results.items()},
    )


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_stats_csv(rows: dict[str, DomainStats], path) -> None:
    """Wide layout: algorithm, <domain>, <domain>_std, ..., mean, std, min."""
    domains: list[str] = []
    for st in rows.values():
        for d in st.per_domain:
            if d not in domains:
                domains.append(d)
    header = ["algorithm"]
    for d in domains:
        header += [d, f"{d}_std"]
    header += ["mean", "std", "min"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for name, st in rows.items():
            row = [name]
            for d in domains:
                m, s = st.per_domain.get(d, (math.nan, math.nan))
                row += [_fmt(m), _fmt(s)]
            row += [_fmt(st.mean), _fmt(st.std), _fmt(st.min)]
            w.writerow(row)


def read_stats_csv(path) -> dict[str, DomainStats]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    domains = header[1:-3:2]
    out = {}
    for row in rows[1:]:
        per = {d: (float(row[1 + 2 * i]), float(row[2 + 2 * i])) for i, d in enumerate(domains)}
        out[row[0]] = DomainStats(per, float(row[-3]), float(row[-2]), float(row[-1]))
    return out


def format_stats_table(rows: dict[str, DomainStats]) -> str:
    """Aligned text, accuracies in percent with one decimal."""
    domains: list[str] = []
    for st in rows.values():
        for d in st.per_domain:
            if d not in domains:
                domains.append(d)
    header = ["algorithm"] + domains + ["mean", "std", "min"]
    body = []
    for name, st in rows.items():
        cells = [name]
        for d in domains:
            m, s = st.per_domain.get(d, (math.nan, math.nan))
            cells.append(f"{100 * m:.1f} +/- {100 * s:.1f}")
        cells += [f"{100 * st.mean:.1f}", f"{100 * st.std:.1f}", f"{100 * st.min:.1f}"]
        body.append(cells)
    return _align([header] + body)


def _align(table: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
    lines = []
    for j, r in enumerate(table):
        lines.append(" | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        if j == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
