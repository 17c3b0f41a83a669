"""
Dataset statistics and age-band bias
=====================================

Build a small synthetic hand-radiograph stand-in, load it through the same
manifest reader used for the RSNA release, and look at how the ages and
genders are distributed.
"""

import sys
import tempfile
from pathlib import Path

from boneage.data import build_synthetic_dataset, compute_stats, load_manifest
from boneage.reporting import emit_plot, write_bias_report

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="boneage_stats_"))

# Each synthetic image is a 64x64 grayscale square whose brightness grows
# with bone age, so a small network has something real to learn.
build_synthetic_dataset(out / "data", n=200, seed=0)
manifest = load_manifest(out / "data" / "manifest.csv", out / "data" / "images")
print(f"{len(manifest.records)} samples from {manifest.source}")

# 12-month bins, ties between bins go to the youngest one
stats = compute_stats(manifest, bin_width=12)
print(f"ages {stats.min_age}..{stats.max_age} months, mean {stats.mean_age:.1f}")
print(f"{stats.male_count} male / {stats.female_count} female, modal bin starts at {stats.modal_bin}")

for kind, name, extra in [("age_distribution", "ages.png", {}),
                          ("age_distribution", "ages_by_gender.png", {"by_gender": True}),
                          ("gender_distribution", "gender.png", {})]:
    record = emit_plot(kind, stats, out / name, **extra)
    print(f"wrote {record.path} with series {sorted(record.series)}")

# Coarser 24-month bands show where the training mass sits and how lopsided
# the gender split is.
report, text = write_bias_report(stats, band_width=24, out_dir=out)
print(text)
