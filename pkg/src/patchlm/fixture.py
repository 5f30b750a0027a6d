"""Shipped benchmark result tables and the regression checks computed from
them. Three delimited files (VQA / localization / challenge) share a
`group,model,<benchmarks>` layout; models repeated across experiment groups
always carry identical values."""

from __future__ import annotations

import csv
from importlib import resources

import numpy as np

from .stats import ScoreTable, aggregate, zscores

FIXTURE_FILES = ("vqa_results.csv", "localization_results.csv", "challenge_results.csv")

ALL_BENCHMARKS = [
    "VQAv2", "GQA", "VizWiz", "TextVQA+OCR", "TextVQA",
    "RefCOCO", "RefCOCO+", "RefCOCOg", "OCIDRef",
    "VSR", "POPE", "TallyQA",
]

# the 11 headline tasks: TextVQA scored without OCR inputs
CORE_BENCHMARKS = [b for b in ALL_BENCHMARKS if b != "TextVQA+OCR"]


def _read_rows(filename: str) -> tuple[list[str], list[dict]]:
    text = resources.files("patchlm.fixtures").joinpath(filename).read_text(encoding="utf-8")
    rows = list(csv.DictReader(text.splitlines()))
    benchmarks = [c for c in rows[0].keys() if c not in ("group", "model")]
    return benchmarks, rows


def load_fixture_rows() -> list[dict]:
    """Merged long-format rows: {group, model, benchmark, value|None}."""
    out = []
    for fn in FIXTURE_FILES:
        benchmarks, rows = _read_rows(fn)
        for row in rows:
            for b in benchmarks:
                v = row[b]
                out.append(
                    {
                        "group": row["group"],
                        "model": row["model"],
                        "benchmark": b,
                        "value": None if v == "N/A" else float(v),
                    }
                )
    return out


def fixture_groups() -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    _, rows = _read_rows(FIXTURE_FILES[0])
    for row in rows:
        groups.setdefault(row["group"], []).append(row["model"])
    return groups


def load_fixture_table(group: str | None = None) -> ScoreTable:
    """Score table over all 12 benchmarks; `group` restricts the model pool
    to one experiment family, otherwise models are deduplicated globally
    (repeats across groups are checked for identical values)."""
    cells: dict[str, dict[str, float | None]] = {}
    order: list[str] = []
    for row in load_fixture_rows():
        if group is not None and row["group"] != group:
            continue
        m = row["model"]
        if m not in cells:
            cells[m] = {}
            order.append(m)
        prev = cells[m].get(row["benchmark"], "absent")
        if prev != "absent" and prev != row["value"]:
            raise ValueError(f"conflicting fixture values for {m} / {row['benchmark']}")
        cells[m][row["benchmark"]] = row["value"]
    if not order:
        raise ValueError(f"unknown fixture group {group!r}")
    values = np.array(
        [
            [np.nan if cells[m].get(b) is None else cells[m][b] for b in ALL_BENCHMARKS]
            for m in order
        ]
    )
    return ScoreTable(order, list(ALL_BENCHMARKS), values)


def regression_checks() -> list[dict]:
    """The table-arithmetic reproduction checks; each entry reports ok/False."""
    checks = []

    repro = zscores(load_fixture_table("reproduction-optimization"))
    agg = aggregate(repro, CORE_BENCHMARKS)
    checks.append(
        {
            "name": "single-stage-7b-vs-reproduction",
            "detail": f"aggregate z {agg['Single-Stage 7B']:+.4f} vs "
            f"{agg['LLaVa v1.5 7B (Reproduction)']:+.4f}",
            "ok": agg["Single-Stage 7B"] >= agg["LLaVa v1.5 7B (Reproduction)"],
        }
    )

    ens = load_fixture_table("ensembling")
    fused = "DINOv2 + SigLIP 384px (Naive Resize)"
    single = "SigLIP ViT-SO 384px (Naive Resize)"
    refcoco_gap = ens.value(fused, "RefCOCO") - ens.value(single, "RefCOCO")
    pope_gap = ens.value(fused, "POPE") - ens.value(single, "POPE")
    checks.append(
        {
            "name": "fused-vs-siglip-refcoco-gap",
            "detail": f"RefCOCO gap {refcoco_gap:.2f}",
            "ok": abs(refcoco_gap - 12.48) < 1e-9,
        }
    )
    checks.append(
        {
            "name": "fused-vs-siglip-pope-gap",
            "detail": f"POPE gap {pope_gap:.2f}",
            "ok": abs(pope_gap - 1.78) < 1e-9,
        }
    )

    full = zscores(load_fixture_table())
    agg_all = aggregate(full, CORE_BENCHMARKS)
    best = max(agg_all, key=agg_all.get)
    checks.append(
        {
            "name": "prism-dinosiglip-13b-top-aggregate",
            "detail": f"best = {best} ({agg_all[best]:+.4f})",
            "ok": best == "Prism-DINOSigLIP 13B",
        }
    )
    return checks
