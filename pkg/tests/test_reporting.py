import copy
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from boneage.data import DatasetManifest, SampleRecord, compute_stats
from boneage.engine import EpochRecord, EvalResult, TrainHistory
from boneage.errors import DuplicateCell, PayloadMismatch
from boneage.models import Regime
from boneage.reporting import (
    RunResult,
    emit_plot,
    parse_markdown_table,
    per_band_mae,
    render_comparison_table,
    write_bias_report,
)

from oracles import brute_mae

PUBLISHED_TABLE = {
    ("vgg16", "full"): 14.00, ("vgg16", "frozen"): 29.51,
    ("inception_v3", "full"): 10.23, ("inception_v3", "frozen"): 29.13,
    ("mobilenet", "full"): 9.55, ("mobilenet", "frozen"): 29.56,
    ("xception", "full"): 9.98, ("xception", "frozen"): 26.65,
}


def published_results():
    return [RunResult(b, r, EvalResult(mae, [])) for (b, r), mae in PUBLISHED_TABLE.items()]


def manifest_from_ages(ages, males=None):
    males = males if males is not None else [i % 2 == 0 for i in range(len(ages))]
    return DatasetManifest(
        tuple(SampleRecord(f"s{i}", Path(f"s{i}.png"), a, m) for i, (a, m) in enumerate(zip(ages, males))), "t")


class TestComparisonTable:
    def test_published_table(self):
        table = render_comparison_table(published_results())
        assert [r.backbone_id for r in table.rows] == ["vgg16", "inception_v3", "mobilenet", "xception"]
        values = sorted(v for row in table.rows for v in (row.mae_method1, row.mae_method2))
        assert values == sorted([14.00, 29.51, 10.23, 29.13, 9.55, 29.56, 9.98, 26.65])
        assert table.best_cell == ("mobilenet", Regime.FULL)
        md = table.to_markdown()
        assert "| MobileNet | **9.55** | 29.56 |" in md
        assert "| XceptionNet | 9.98 | 26.65 |" in md

    def test_empty(self):
        table = render_comparison_table([])
        assert table.rows == [] and table.best_cell is None
        assert len(table.to_markdown().strip().splitlines()) == 2

    def test_single(self):
        table = render_comparison_table([RunResult("tiny_test", "frozen", EvalResult(12.0, []))])
        assert len(table.rows) == 1
        assert table.rows[0].mae_method1 is None and table.rows[0].mae_method2 == 12.0
        assert table.best_cell == ("tiny_test", Regime.FROZEN)
        assert "n/a" in table.to_markdown()

    def test_duplicate(self):
        results = published_results() + [RunResult("vgg16", "full", EvalResult(1.0, []))]
        with pytest.raises(DuplicateCell):
            render_comparison_table(results)

    def test_json(self):
        payload = json.loads(json.dumps(render_comparison_table(published_results()).to_json()))
        assert payload["best_cell"] == {"backbone_id": "mobilenet", "regime": "full"}
        assert len(payload["rows"]) == 4

    def test_markdown_round_trip_published(self):
        table = render_comparison_table(published_results())
        assert parse_markdown_table(table.to_markdown()) == table.rows

    @given(st.dictionaries(
        st.tuples(st.sampled_from(["vgg16", "inception_v3", "mobilenet", "xception", "tiny_test"]),
                  st.sampled_from(["full", "frozen"])),
        st.floats(0, 300).map(lambda x: round(x, 2)),
        max_size=10,
    ))
    def test_fidelity_and_best_cell(self, cells):
        table = render_comparison_table([RunResult(b, r, EvalResult(v, [])) for (b, r), v in cells.items()])
        parsed = {(row.backbone_id, regime): value
                  for row in parse_markdown_table(table.to_markdown())
                  for regime, value in (("full", row.mae_method1), ("frozen", row.mae_method2))
                  if value is not None}
        assert parsed == pytest.approx(cells, abs=0.005)
        # independent scan in table order, first minimum wins
        best = None
        for row in table.rows:
            for regime, value in ((Regime.FULL, row.mae_method1), (Regime.FROZEN, row.mae_method2)):
                if value is not None and (best is None or value < best[1]):
                    best = ((row.backbone_id, regime), value)
        assert table.best_cell == (None if best is None else best[0])

    def test_negative_mae_rejected(self):
        with pytest.raises(ValueError):
            RunResult("vgg16", "full", EvalResult(-1.0, []))


class TestPlots:
    def test_scatter_perfect_predictor(self, tmp_path):
        result = EvalResult(0.0, [(f"s{i}", float(a), float(a)) for i, a in enumerate([5, 60, 150, 200])])
        before = copy.deepcopy(result)
        record = emit_plot("scatter", result, tmp_path / "scatter.png")
        xs, ys = record.series["predictions"]
        assert xs == ys == [5.0, 60.0, 150.0, 200.0]
        ix, iy = record.series["identity"]
        assert ix == iy
        assert Image.open(record.path).format == "PNG"
        assert result == before

    def test_history_curve(self, tmp_path):
        history = TrainHistory([EpochRecord(i, 100.0 - i, 20.0 - i, 25.0 - i) for i in range(15)], 14, False)
        record = emit_plot("history_curve", history, tmp_path / "curve.png")
        assert set(record.series) == {"train_mae", "val_mae"}
        assert record.series["train_mae"][1] == history.train_mae
        assert record.series["val_mae"][1] == history.val_mae
        assert len(record.series["val_mae"][0]) == 15

    def test_age_distribution(self, tmp_path):
        stats = compute_stats(manifest_from_ages([12, 24, 24, 36], [True, True, False, False]), 12)
        record = emit_plot("age_distribution", stats, tmp_path / "ages.png")
        xs, heights = record.series["all"]
        assert dict(zip(xs, heights)) == {12.0: 1.0, 24.0: 2.0, 36.0: 1.0}
        by_gender = emit_plot("age_distribution", stats, tmp_path / "ages_g.png", by_gender=True)
        assert sum(by_gender.series["male"][1]) == 2 and sum(by_gender.series["female"][1]) == 2

    def test_gender_distribution(self, tmp_path):
        stats = compute_stats(manifest_from_ages([12, 24, 24, 36], [True, True, True, False]), 12)
        record = emit_plot("gender_distribution", stats, tmp_path / "g.png")
        assert record.series["gender"][1] == [3.0, 1.0]

    def test_payload_mismatch(self, tmp_path):
        with pytest.raises(PayloadMismatch):
            emit_plot("scatter", TrainHistory(), tmp_path / "x.png")
        with pytest.raises(ValueError):
            emit_plot("pie", TrainHistory(), tmp_path / "x.png")


class TestBiasReport:
    def test_rsna_shaped_gender_ratio_and_modal_band(self):
        # a histogram shaped like the RSNA training release: peak in the 144-168 band
        ages = [30] * 500 + [100] * 2000 + [150] * 5000 + [200] * 3000 + [260] * 2111
        males = [True] * 6833 + [False] * 5778
        stats = compute_stats(manifest_from_ages(ages, males), 12)
        report, text = write_bias_report(stats)
        assert report["gender_ratio"] == pytest.approx(6833 / 5778)
        assert round(report["gender_ratio"], 2) == 1.18
        assert report["modal_band"]["lower"] == 144
        assert sum(b["count"] for b in report["band_mass"]) == 12611
        assert "1.18" in text

    def test_uniform_bands(self):
        ages = list(range(24, 288))
        report, _ = write_bias_report(compute_stats(manifest_from_ages(ages), 12), band_width=24)
        counts = [b["count"] for b in report["band_mass"]]
        assert len(counts) == 11
        assert max(counts) - min(counts) <= 1
        assert report["modal_band"]["share"] == pytest.approx(1 / 11)

    def test_per_band_mae_constant_predictor(self, tmp_path):
        rng = np.random.default_rng(5)
        ages = rng.integers(1, 289, size=120)
        c = 130.0
        result = EvalResult(brute_mae([c] * 120, ages), [(f"s{i}", float(a), c) for i, a in enumerate(ages)])
        stats = compute_stats(manifest_from_ages(list(ages)), 12)
        report, _ = write_bias_report(stats, [RunResult("tiny_test", "full", result)], band_width=24, out_dir=tmp_path)
        rows = report["per_band_mae"]["tiny_test/full"]
        for row in rows:
            members = [a for a in ages if row["band"] <= a < row["band"] + 24]
            total = 0.0
            for a in members:
                total += abs(a - c)
            assert row["n"] == len(members)
            assert row["mae"] == pytest.approx(total / len(members), abs=1e-9)
        assert sum(r["n"] for r in rows) == 120
        assert json.loads((tmp_path / "bias_report.json").read_text())["per_band_mae"] == report["per_band_mae"]
        assert (tmp_path / "bias_report.txt").read_text().startswith("samples: 120")

    def test_per_band_helper(self):
        result = EvalResult(0, [("a", 10.0, 12.0), ("b", 30.0, 20.0), ("c", 40.0, 40.0)])
        assert per_band_mae(result, 24) == {0: (1, 2.0), 24: (2, 5.0)}

    def test_rejects_empty_and_misaligned(self):
        with pytest.raises(ValueError):
            write_bias_report(compute_stats(manifest_from_ages([])))
        with pytest.raises(ValueError):
            write_bias_report(compute_stats(manifest_from_ages([10, 20]), 12), band_width=30)
