"""Comparison tables, plots and the age/gender bias report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .data import DatasetStats
from .engine import EvalResult, TrainHistory, mae_metric
from .errors import DuplicateCell, PayloadMismatch
from .models import Regime

DISPLAY_NAMES = {
    "vgg16": "VGG-16",
    "inception_v3": "Inception V3",
    "mobilenet": "MobileNet",
    "xception": "XceptionNet",
    "tiny_test": "tiny_test",
}
_ROW_ORDER = list(DISPLAY_NAMES)
ABSENT = "n/a"
TABLE_HEADER = ("Pretrained model", "MAE (in months) using method 1", "MAE (in months) using method 2")


@dataclass
class RunResult:
    backbone_id: str
    regime: Regime
    eval: EvalResult
    history: TrainHistory | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.regime = Regime.parse(self.regime)
        if self.eval.mae < 0:
            raise ValueError("MAE cannot be negative")

    @property
    def mae(self) -> float:
        return self.eval.mae


@dataclass(frozen=True)
class TableRow:
    backbone_id: str
    mae_method1: float | None
    mae_method2: float | None


@dataclass
class ComparisonTable:
    rows: list[TableRow]
    best_cell: tuple[str, Regime] | None

    def cells(self):
        for row in self.rows:
            for regime, value in ((Regime.FULL, row.mae_method1), (Regime.FROZEN, row.mae_method2)):
                if value is not None:
                    yield row.backbone_id, regime, value

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(TABLE_HEADER) + " |", "|---|---:|---:|"]
        for row in self.rows:
            cells = []
            for regime, value in ((Regime.FULL, row.mae_method1), (Regime.FROZEN, row.mae_method2)):
                if value is None:
                    cells.append(ABSENT)
                elif self.best_cell == (row.backbone_id, regime):
                    cells.append(f"**{value:.2f}**")
                else:
                    cells.append(f"{value:.2f}")
            name = DISPLAY_NAMES.get(row.backbone_id, row.backbone_id)
            lines.append(f"| {name} | {cells[0]} | {cells[1]} |")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "rows": [
                {"backbone_id": r.backbone_id, "mae_method1": r.mae_method1, "mae_method2": r.mae_method2}
                for r in self.rows
            ],
            "best_cell": None if self.best_cell is None
            else {"backbone_id": self.best_cell[0], "regime": self.best_cell[1].value},
        }


def render_comparison_table(results: Sequence[RunResult]) -> ComparisonTable:
    """One row per backbone, method 1 (FULL) and method 2 (FROZEN) columns."""
    cells: dict[tuple[str, Regime], float] = {}
    for res in results:
        key = (res.backbone_id, res.regime)
        if key in cells:
            raise DuplicateCell(res.backbone_id, res.regime.value)
        cells[key] = float(res.mae)

    seen = list(dict.fromkeys(r.backbone_id for r in results))
    ordered = [b for b in _ROW_ORDER if b in seen] + [b for b in seen if b not in _ROW_ORDER]
    rows = [TableRow(b, cells.get((b, Regime.FULL)), cells.get((b, Regime.FROZEN))) for b in ordered]

    table = ComparisonTable(rows, None)
    best = None
    for backbone_id, regime, value in table.cells():
        if best is None or value < best[2]:
            best = (backbone_id, regime, value)
    table.best_cell = None if best is None else (best[0], best[1])
    return table


def parse_markdown_table(text: str) -> list[TableRow]:
    """Inverse of ``ComparisonTable.to_markdown`` (values at two decimals)."""
    by_name = {v: k for k, v in DISPLAY_NAMES.items()}
    rows = []
    for line in text.strip().splitlines()[2:]:
        parts = [p.strip() for p in line.strip().strip("|").split("|")]
        if len(parts) != 3:
            raise ValueError(f"unexpected table row: {line!r}")

        def value(cell):
            cell = cell.replace("*", "")
            return None if cell == ABSENT else float(cell)

        rows.append(TableRow(by_name.get(parts[0], parts[0]), value(parts[1]), value(parts[2])))
    return rows


# ---- plots -----------------------------------------------------------------

@dataclass
class PlotRecord:
    """The file written and the data series actually drawn, keyed by label."""

    path: Path
    series: dict[str, tuple[list[float], list[float]]]


PLOT_KINDS = ("history_curve", "scatter", "age_distribution", "gender_distribution")
_PAYLOADS = {
    "history_curve": TrainHistory,
    "scatter": EvalResult,
    "age_distribution": DatasetStats,
    "gender_distribution": DatasetStats,
}


def _plot_history(ax, history: TrainHistory, title):
    epochs = [r.epoch + 1 for r in history.records]
    ax.plot(epochs, history.train_mae, marker="o", label="train_mae")
    ax.plot(epochs, history.val_mae, marker="o", label="val_mae")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("MAE (months)")
    ax.set_title(title or "MAE months vs. Epochs")
    ax.legend()


def _plot_scatter(ax, result: EvalResult, title, tolerance):
    truth = np.array([t for _, t, _ in result.predictions], dtype=float)
    pred = np.array([p for _, _, p in result.predictions], dtype=float)
    ax.scatter(truth, pred, s=12, alpha=0.7, label="predictions")
    both = np.concatenate([truth, pred]) if truth.size else np.array([0.0, 288.0])
    lo, hi = float(both.min()), float(both.max())
    if lo == hi:
        lo, hi = lo - 1.0, hi + 1.0
    ax.plot([lo, hi], [lo, hi], color="k", linewidth=1, label="identity")
    if tolerance:
        ax.fill_between([lo, hi], [lo - tolerance, hi - tolerance], [lo + tolerance, hi + tolerance],
                        color="tab:green", alpha=0.15, label=f"±{tolerance:g} months")
    ax.set_xlabel("Actual age (months)")
    ax.set_ylabel("Predicted age (months)")
    ax.set_title(title or f"Actual age vs. Predicted age in months (MAE {result.mae:.2f})")
    ax.legend()


def _plot_ages(ax, stats: DatasetStats, title, by_gender):
    w = stats.bin_width
    if by_gender:
        for offset, gender in ((0.0, "male"), (0.5, "female")):
            hist = stats.per_gender_histograms.get(gender, {})
            ax.bar([b + offset * w for b in hist], list(hist.values()), width=w / 2, align="edge", label=gender)
        ax.legend()
    else:
        hist = stats.age_histogram
        ax.bar(list(hist), list(hist.values()), width=w, align="edge", edgecolor="k", label="all")
    ax.set_xlabel("Bone age (months)")
    ax.set_ylabel("Count")
    ax.set_title(title or "Bone age distribution")


def _plot_gender(ax, stats: DatasetStats, title):
    ax.bar(["male", "female"], [stats.male_count, stats.female_count], color=["tab:blue", "tab:orange"],
           label="gender")
    ax.set_ylabel("Count")
    ax.set_title(title or "Gender distribution")


def _drawn_series(ax) -> dict:
    series = {}
    for line in ax.get_lines():
        series[line.get_label()] = (list(map(float, line.get_xdata())), list(map(float, line.get_ydata())))
    for coll in ax.collections:
        label = coll.get_label()
        if label.startswith("_") or not hasattr(coll, "get_offsets") or len(coll.get_offsets()) == 0:
            continue
        offsets = np.asarray(coll.get_offsets())
        if offsets.ndim == 2 and offsets.shape[1] == 2 and not label.startswith("±"):
            series[label] = (offsets[:, 0].tolist(), offsets[:, 1].tolist())
    for container in ax.containers:
        xs = [float(p.get_x()) for p in container.patches]
        ys = [float(p.get_height()) for p in container.patches]
        series[container.get_label()] = (xs, ys)
    return series


def emit_plot(kind: str, payload, out_path, title: str | None = None, tolerance: float | None = 12.0,
              by_gender: bool = False, dpi: int = 100) -> PlotRecord:
    """Render one figure to ``out_path`` (PNG) and report what was drawn.

    ``tolerance`` draws a ±band around the identity line on scatter plots;
    ``by_gender`` splits the age histogram into male/female bars.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"kind must be one of {PLOT_KINDS}, got {kind!r}")
    if not isinstance(payload, _PAYLOADS[kind]):
        raise PayloadMismatch(f"{kind} needs a {_PAYLOADS[kind].__name__}, got {type(payload).__name__}")

    fig = Figure(figsize=(6, 4.5))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    if kind == "history_curve":
        _plot_history(ax, payload, title)
    elif kind == "scatter":
        _plot_scatter(ax, payload, title, tolerance)
    elif kind == "age_distribution":
        _plot_ages(ax, payload, title, by_gender)
    else:
        _plot_gender(ax, payload, title)
    fig.tight_layout()

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=dpi, format="png")
    return PlotRecord(out_path, _drawn_series(ax))


# ---- bias report -------------------------------------------------------------

def _band_of(age: float, band_width: int) -> int:
    return int(age // band_width) * band_width


def band_mass(stats: DatasetStats, band_width: int = 24) -> dict[int, int]:
    if band_width % stats.bin_width:
        raise ValueError(f"band width {band_width} is not a multiple of the histogram bin width {stats.bin_width}")
    bands: dict[int, int] = {}
    for lower, count in stats.age_histogram.items():
        band = _band_of(lower, band_width)
        bands[band] = bands.get(band, 0) + count
    return dict(sorted(bands.items()))


def per_band_mae(result: EvalResult, band_width: int = 24) -> dict[int, tuple[int, float]]:
    """{band lower edge: (samples, MAE)} over the predictions."""
    groups: dict[int, list[tuple[float, float]]] = {}
    for _, true, pred in result.predictions:
        groups.setdefault(_band_of(true, band_width), []).append((true, pred))
    return {
        band: (len(pairs), mae_metric([p for _, p in pairs], [t for t, _ in pairs]))
        for band, pairs in sorted(groups.items())
    }


def write_bias_report(stats: DatasetStats, results: Sequence[RunResult] | None = None, band_width: int = 24,
                      out_dir=None) -> tuple[dict, str]:
    """Age-band concentration, gender balance and, with results, per-band error.

    Returns ``(report, text)``; with ``out_dir`` both are also written as
    ``bias_report.json`` and ``bias_report.txt``.
    """
    if stats.total == 0:
        raise ValueError("bias report needs a non-empty dataset")
    bands = band_mass(stats, band_width)
    top = max(bands.values())
    modal = min(b for b, c in bands.items() if c == top)
    ratio = stats.male_count / stats.female_count if stats.female_count else None

    report = {
        "gender_ratio": ratio,
        "male_count": stats.male_count,
        "female_count": stats.female_count,
        "band_width": band_width,
        "modal_band": {"lower": modal, "upper": modal + band_width, "count": top, "share": top / stats.total},
        "band_mass": [{"band": b, "count": c, "share": c / stats.total} for b, c in bands.items()],
    }
    if results:
        report["per_band_mae"] = {
            f"{r.backbone_id}/{r.regime.value}": [
                {"band": b, "n": n, "mae": m} for b, (n, m) in per_band_mae(r.eval, band_width).items()
            ]
            for r in results
        }

    lines = [
        f"samples: {stats.total} (male {stats.male_count}, female {stats.female_count})",
        "gender ratio male:female = " + ("undefined (no females)" if ratio is None else f"{ratio:.2f}"),
        f"modal {band_width}-month band: [{modal}, {modal + band_width}) months holding "
        f"{top} samples ({100 * top / stats.total:.1f}% of the data)",
        "band mass:",
    ]
    lines += [f"  [{b:3d}, {b + band_width:3d}): {c:6d}  {100 * c / stats.total:5.1f}%" for b, c in bands.items()]
    for key, rows in report.get("per_band_mae", {}).items():
        lines.append(f"per-band MAE for {key}:")
        lines += [f"  [{r['band']:3d}, {r['band'] + band_width:3d}): n={r['n']:4d}  MAE {r['mae']:.2f}" for r in rows]
    text = "\n".join(lines) + "\n"

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "bias_report.json").write_text(json.dumps(report, indent=2))
        (out_dir / "bias_report.txt").write_text(text)
    return report, text
