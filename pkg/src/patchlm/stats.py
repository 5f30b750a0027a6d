"""Cross-benchmark model comparison: per-benchmark Z-score normalization,
per-model aggregates, and a one-sided paired-difference t test at alpha=0.01.

The historical label "1-sided Fisher T-test" is preserved in result metadata;
the computation is a one-sided one-sample t test on pairwise normalized
aggregate differences.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

ALPHA = 0.01
TEST_LABEL = "1-sided Fisher T-test"


@dataclass
class ScoreTable:
    models: list[str]
    benchmarks: list[str]
    values: np.ndarray  # [n_models, n_benchmarks], NaN where missing

    def __post_init__(self):
        if len(set(self.models)) != len(self.models):
            raise ValueError("duplicate model names")
        if len(set(self.benchmarks)) != len(self.benchmarks):
            raise ValueError("duplicate benchmark names")
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.models), len(self.benchmarks)):
            raise ValueError("value matrix shape mismatch")
        present = self.values[~np.isnan(self.values)]
        if not np.all(np.isfinite(present)):
            raise ValueError("non-finite score values")

    def value(self, model: str, benchmark: str) -> float:
        return float(self.values[self.models.index(model), self.benchmarks.index(benchmark)])

    def restrict(self, models: list[str] | None = None, benchmarks: list[str] | None = None):
        models = models if models is not None else self.models
        benchmarks = benchmarks if benchmarks is not None else self.benchmarks
        mi = [self.models.index(m) for m in models]
        bi = [self.benchmarks.index(b) for b in benchmarks]
        return ScoreTable(list(models), list(benchmarks), self.values[np.ix_(mi, bi)])

    # -- delimited round-trip -------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model"] + self.benchmarks)
        for i, m in enumerate(self.models):
            row = [m] + [
                "N/A" if math.isnan(v) else repr(float(v)) for v in self.values[i]
            ]
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScoreTable":
        rows = list(csv.reader(io.StringIO(text)))
        benchmarks = rows[0][1:]
        models, values = [], []
        for row in rows[1:]:
            if not row:
                continue
            models.append(row[0])
            values.append([float("nan") if v == "N/A" else float(v) for v in row[1:]])
        return cls(models, benchmarks, np.array(values, dtype=float))

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_csv())

    @classmethod
    def read(cls, path) -> "ScoreTable":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_csv(f.read())


def zscores(table: ScoreTable) -> ScoreTable:
    """Per-benchmark z = (v - mean) / population std over present values;
    zero-variance columns map to all-zero z."""
    z = np.full_like(table.values, np.nan)
    for j in range(len(table.benchmarks)):
        col = table.values[:, j]
        present = ~np.isnan(col)
        if present.sum() < 2:
            raise ValueError(
                f"benchmark {table.benchmarks[j]!r} has fewer than 2 values to normalize"
            )
        mean = col[present].mean()
        std = col[present].std()  # population std (ddof=0)
        if std == 0:
            z[present, j] = 0.0
        else:
            z[present, j] = (col[present] - mean) / std
    return ScoreTable(list(table.models), list(table.benchmarks), z)


def aggregate(z_table: ScoreTable, benchmarks: list[str] | None = None) -> dict[str, float]:
    """Per-model mean z over present values of the chosen benchmark subset."""
    if benchmarks is not None and not benchmarks:
        raise ValueError("benchmark subset must be nonempty")
    sub = z_table if benchmarks is None else z_table.restrict(benchmarks=benchmarks)
    out: dict[str, float] = {}
    for i, m in enumerate(sub.models):
        row = sub.values[i]
        present = ~np.isnan(row)
        if not present.any():
            raise ValueError(f"model {m!r} has no present benchmark values")
        out[m] = float(row[present].mean())
    return out


@dataclass
class SignificanceResult:
    base: list[str]
    alternate: list[str]
    differences: list[float]
    t_statistic: float | None
    degrees_of_freedom: int | None
    p_value: float | None
    significant: bool
    verdict: str
    test_label: str = TEST_LABEL
    alpha: float = ALPHA


def t_test_differences(differences: list[float]) -> SignificanceResult:
    """One-sided one-sample t test of mean(d) > 0."""
    d = np.asarray(differences, dtype=float)
    n = len(d)
    if n < 2 or d.std(ddof=1) == 0:
        return SignificanceResult(
            base=[], alternate=[], differences=list(map(float, d)),
            t_statistic=None, degrees_of_freedom=None, p_value=None,
            significant=False, verdict="insufficient data",
        )
    t = d.mean() / (d.std(ddof=1) / math.sqrt(n))
    p = float(sps.t.sf(t, df=n - 1))
    sig = p < ALPHA
    return SignificanceResult(
        base=[], alternate=[], differences=list(map(float, d)),
        t_statistic=float(t), degrees_of_freedom=n - 1, p_value=p,
        significant=sig, verdict="significant" if sig else "not significant",
    )


def compare(
    base_models: list[str],
    alternate_models: list[str],
    z_table: ScoreTable,
    benchmarks: list[str] | None = None,
) -> SignificanceResult:
    """Pairwise aggregate differences alt - base over the cross product,
    then the one-sided t test of mean difference > 0."""
    if not base_models or not alternate_models:
        raise ValueError("both model sets must be nonempty")
    if set(base_models) & set(alternate_models):
        raise ValueError("base and alternate sets must be disjoint")
    agg = aggregate(z_table, benchmarks)
    diffs = [agg[a] - agg[b] for b in base_models for a in alternate_models]
    result = t_test_differences(diffs)
    result.base = list(base_models)
    result.alternate = list(alternate_models)
    return result


# ---------------------------------------------------------------------------
# Report emission

REPORT_FORMATS = ("table-text", "delimited", "radar-data")


def emit_report(
    table: ScoreTable,
    z_table: ScoreTable | None = None,
    comparisons: list[SignificanceResult] | None = None,
    fmt: str = "table-text",
) -> str:
    """Deterministic text report in one of three formats."""
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown report format {fmt!r}")
    if not table.models:
        raise ValueError("empty score table")
    z_table = z_table or zscores(table)

    if fmt == "delimited":
        return table.to_csv()

    if fmt == "radar-data":
        lines = ["model\tbenchmark\traw\tz\taxis_min\taxis_max"]
        mins = np.nanmin(table.values, axis=0)
        maxs = np.nanmax(table.values, axis=0)
        for i, m in enumerate(table.models):
            for j, b in enumerate(table.benchmarks):
                v = table.values[i, j]
                if math.isnan(v):
                    continue
                z = z_table.values[i, j]
                lines.append(f"{m}\t{b}\t{v:.2f}\t{z:+.4f}\t{mins[j]:.2f}\t{maxs[j]:.2f}")
        return "\n".join(lines) + "\n"

    # table-text
    width = max(len(m) for m in table.models) + 2
    header = "model".ljust(width) + "  ".join(f"{b:>12}" for b in table.benchmarks) + f"{'mean-z':>12}"
    lines = [header, "-" * len(header)]
    agg = aggregate(z_table)
    for i, m in enumerate(table.models):
        cells = []
        for j in range(len(table.benchmarks)):
            v = table.values[i, j]
            cells.append(f"{'N/A':>12}" if math.isnan(v) else f"{v:12.2f}")
        lines.append(m.ljust(width) + "  ".join(cells) + f"{agg[m]:+12.4f}")
    if comparisons:
        lines.append("")
        for c in comparisons:
            p = "n/a" if c.p_value is None else f"{c.p_value:.4g}"
            lines.append(
                f"{c.test_label}: alt {c.alternate} vs base {c.base} -> p={p} ({c.verdict})"
            )
    return "\n".join(lines) + "\n"
