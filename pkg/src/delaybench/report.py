"""Aggregation of per-split results into comparison tables.

Everything is stored as raw ratios; percentages, rounding and the
``mean (sd)`` layout exist only in the emitted files.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PREDICTOR_SETS = ("subj", "obj", "comb")
INTRA_METRICS = ("ppv", "tpr", "f_tp", "f_tn", "mcc", "acc", "mae")
INTRA_HEADERS = (
    "PPV (SD) [%]",
    "TPR (SD) [%]",
    "F_tp (SD) [%]",
    "F_tn (SD) [%]",
    "MCC (SD) [%]",
    "ACC (SD) [%]",
    "MAE (SD)",
)
META_SCHEMA = "delaybench-report-meta/1"


class ReportError(ValueError):
    pass


class IncompleteReportError(ReportError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(f"{v}/{p}/split{s}" for v, p, s in self.missing[:20])
        more = f" (+{len(self.missing) - 20} more)" if len(self.missing) > 20 else ""
        super().__init__(f"{len(self.missing)} missing or failed cells: {shown}{more}")


@dataclass
class CellResult:
    """Outcome of tuning, refitting and testing one (variant, set, split)."""

    variant: str
    predictor_set: str
    split: int
    cv_mean_g: float = float("nan")
    cv_sd_g: float = float("nan")
    best_config: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    feature_names: list = field(default_factory=list)
    importance: list | None = None
    # days per normalized delay unit for this split
    delay_scale: float = 1.0
    error: str | None = None

    @property
    def key(self) -> tuple:
        return (self.variant, self.predictor_set, self.split)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CellResult":
        return cls(**json.loads(text))


@dataclass
class ExperimentReport:
    variants: tuple
    predictor_sets: tuple = PREDICTOR_SETS
    n_splits: int = 10
    cells: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, cell: CellResult) -> None:
        self.cells[cell.key] = cell

    def entries(self, variant: str, predictor_set: str) -> list:
        return [
            self.cells[(variant, predictor_set, s)]
            for s in range(self.n_splits)
            if (variant, predictor_set, s) in self.cells and self.cells[(variant, predictor_set, s)].ok
        ]

    def expected_keys(self):
        for v in self.variants:
            for p in self.predictor_sets:
                for s in range(self.n_splits):
                    yield (v, p, s)

    def missing(self) -> list:
        return [k for k in self.expected_keys() if k not in self.cells or not self.cells[k].ok]

    def failed(self) -> list:
        return [c for c in self.cells.values() if not c.ok]

    def check_complete(self) -> None:
        missing = self.missing()
        if missing:
            raise IncompleteReportError(missing)


# --------------------------------------------------------------------------
# aggregation


def aggregate(entries):
    """Mean and sample SD.

    Floats give one ``(mean, sd)`` pair; mappings (metric name -> value) give a
    dict of pairs, one per key.
    """
    entries = list(entries)
    if len(entries) < 2:
        raise ReportError(f"need at least 2 entries to aggregate, got {len(entries)}")
    if isinstance(entries[0], dict) or hasattr(entries[0], "as_dict"):
        rows = [e if isinstance(e, dict) else e.as_dict() for e in entries]
        return {k: aggregate([r[k] for r in rows]) for k in rows[0]}
    arr = np.asarray(entries, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1))


def _metric_values(report: ExperimentReport, variant, pset, metric) -> list:
    cells = report.entries(variant, pset)
    if metric == "cv_g":
        return [c.cv_mean_g for c in cells]
    if metric == "mae_days":
        return [c.test["mae"] * c.delay_scale for c in cells]
    return [c.test[metric] for c in cells]


def cell_stats(report: ExperimentReport, variant, pset, metric) -> tuple:
    return aggregate(_metric_values(report, variant, pset, metric))


@dataclass(frozen=True)
class GapEntry:
    variant: str
    predictor_set: str
    cv_mean_g: float
    test_mean_g: float

    @property
    def gap(self) -> float:
        return self.cv_mean_g - self.test_mean_g


def cv_test_gap(report: ExperimentReport) -> list:
    """Signed CV-minus-test mean G per (variant, set), smallest |gap| first."""
    report.check_complete()
    rows = []
    for v in report.variants:
        for p in report.predictor_sets:
            cv = float(np.mean(_metric_values(report, v, p, "cv_g")))
            te = float(np.mean(_metric_values(report, v, p, "g")))
            rows.append(GapEntry(v, p, cv, te))
    order = sorted(range(len(rows)), key=lambda i: (abs(rows[i].gap), i))
    return [rows[i] for i in order]


# --------------------------------------------------------------------------
# tables


@dataclass
class Table:
    name: str
    title: str
    header: tuple
    labels: list
    # stats[r][c] = (mean, sd) in raw units
    stats: list
    kinds: tuple  # per column: "g", "pct" or "mae"
    best: list  # per column: row index of the flagged cell

    def cell_text(self, r, c) -> str:
        mean, sd = self.stats[r][c]
        kind = self.kinds[c]
        if kind == "pct":
            return f"{100 * mean:.2f} ({100 * sd:.2f})"
        if kind == "mae":
            return f"{mean:.2f} ({sd:.2f})"
        return f"{mean:.4f} ({sd:.4f})"


def _best_rows(stats, kinds) -> list:
    best = []
    for c, kind in enumerate(kinds):
        means = np.array([row[c][0] for row in stats])
        best.append(int(np.argmin(means)) if kind == "mae" else int(np.argmax(means)))
    return best


def _intra_stats(report, variant, pset):
    return [cell_stats(report, variant, pset, "mae_days" if m == "mae" else m) for m in INTRA_METRICS]


_INTRA_KINDS = ("pct",) * 6 + ("mae",)


def inter_winners(report: ExperimentReport) -> dict:
    """Per predictor set, the variant with the highest mean test G (first on ties)."""
    winners = {}
    for p in report.predictor_sets:
        means = [np.mean(_metric_values(report, v, p, "g")) for v in report.variants]
        winners[p] = report.variants[int(np.argmax(means))]
    return winners


def build_tables(report: ExperimentReport) -> list:
    report.check_complete()
    psets = report.predictor_sets
    tables = []

    header = ("ML Alg.",) + tuple(f"CV {p}" for p in psets) + tuple(f"Test {p}" for p in psets)
    stats = [
        [cell_stats(report, v, p, "cv_g") for p in psets] + [cell_stats(report, v, p, "g") for p in psets]
        for v in report.variants
    ]
    kinds = ("g",) * (2 * len(psets))
    tables.append(
        Table("gscores", "Mean G-score (SD), cross-validation vs test", header,
              list(report.variants), stats, kinds, _best_rows(stats, kinds))
    )

    for p in psets:
        stats = [_intra_stats(report, v, p) for v in report.variants]
        tables.append(
            Table(f"intra_{p}", f"Intra-model comparison, {p} predictors", ("ML Alg.",) + INTRA_HEADERS,
                  list(report.variants), stats, _INTRA_KINDS, _best_rows(stats, _INTRA_KINDS))
        )

    winners = inter_winners(report)
    stats = [_intra_stats(report, winners[p], p) for p in psets]
    tables.append(
        Table("inter", "Inter-model comparison of the best variant per predictor set",
              ("Pred type",) + INTRA_HEADERS, [f"{p} ({winners[p]})" for p in psets],
              stats, _INTRA_KINDS, _best_rows(stats, _INTRA_KINDS))
    )

    imp = importance_table(report)
    if imp is not None:
        tables.append(imp)
    return tables


def importance_table(report: ExperimentReport) -> Table | None:
    """Mean (SD) importance of each feature for the ensemble variants that ran."""
    columns = [(v, p) for v in ("RF", "GBM") if v in report.variants for p in report.predictor_sets]
    if not columns:
        return None
    features = []
    for v, p in columns:
        for f in report.entries(v, p)[0].feature_names:
            if f not in features:
                features.append(f)
    stats = []
    for f in features:
        row = []
        for v, p in columns:
            vals = []
            for c in report.entries(v, p):
                vals.append(c.importance[c.feature_names.index(f)] if f in c.feature_names else 0.0)
            row.append(aggregate(vals))
        stats.append(row)
    kinds = ("pct",) * len(columns)
    header = ("Feature",) + tuple(f"{v} {p} (SD) [%]" for v, p in columns)
    return Table("importance", "Impurity-decrease importance", header, features, stats, kinds,
                 _best_rows(stats, kinds))


def _csv_quote(text: str) -> str:
    if any(ch in text for ch in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


def render_csv(table: Table) -> str:
    lines = [",".join(_csv_quote(h) for h in table.header)]
    for r, label in enumerate(table.labels):
        cells = [label] + [table.cell_text(r, c) for c in range(len(table.kinds))]
        lines.append(",".join(_csv_quote(x) for x in cells))
    lines.append(",".join(["best"] + [_csv_quote(table.labels[b]) for b in table.best]))
    return "\n".join(lines) + "\n"


def render_markdown(table: Table) -> str:
    lines = [f"### {table.title}", "", "| " + " | ".join(table.header) + " |"]
    lines.append("|" + "---|" * len(table.header))
    for r, label in enumerate(table.labels):
        cells = []
        for c in range(len(table.kinds)):
            text = table.cell_text(r, c)
            cells.append(f"**{text}**" if table.best[c] == r else text)
        lines.append("| " + " | ".join([label] + cells) + " |")
    return "\n".join(lines) + "\n"


FORMATS = {"csv": ("csv", render_csv), "markdown": ("md", render_markdown), "md": ("md", render_markdown)}


def emit_tables(report: ExperimentReport, out_dir, fmt: str = "csv") -> list:
    """Write every table plus ``meta.json`` into ``out_dir``; return the paths."""
    if fmt not in FORMATS:
        raise ReportError(f"unknown format {fmt!r}; use csv or markdown")
    tables = build_tables(report)
    ext, render = FORMATS[fmt]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for table in tables:
        path = out / f"{table.name}.{ext}"
        path.write_text(render(table), encoding="utf-8")
        paths.append(path)
    meta = {
        "schema": META_SCHEMA,
        "variants": list(report.variants),
        "predictor_sets": list(report.predictor_sets),
        "n_splits": report.n_splits,
        "winners": inter_winners(report),
        **report.meta,
    }
    path = out / "meta.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths.append(path)
    return paths
