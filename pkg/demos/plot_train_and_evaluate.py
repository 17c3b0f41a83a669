"""
Training a regressor with both transfer regimes
===============================================

Train the ``tiny_test`` backbone twice on synthetic data, once with every
weight trainable (method 1) and once with only the regression head
trainable (method 2), then score both on a held-out split and put the
results in a comparison table.

The four ImageNet backbones follow exactly the same path; only the input
size and the weights differ.
"""

import sys
import tempfile
from pathlib import Path

from boneage.data import build_synthetic_dataset, make_splits
from boneage.engine import TrainConfig, evaluate, train
from boneage.models import Regime, build_model, trainable_parameter_count
from boneage.reporting import RunResult, emit_plot, render_comparison_table
from boneage.transforms import AugmentParams, TransformConfig

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="boneage_train_"))
manifest = build_synthetic_dataset(out / "data", n=120, seed=1)
split = make_splits(manifest, {"train": 80, "val": 24, "test": 16}, seed=42)
train_set = manifest.subset(split.train_ids)
val_set = manifest.subset(split.val_ids)
test_set = manifest.subset(split.test_ids)

model = build_model("tiny_test")
transforms = TransformConfig(model.spec.input_spec, AugmentParams())
cfg = TrainConfig(max_epochs=15, patience=10, batch_size=16, seed=0)

results = []
for regime in (Regime.FULL, Regime.FROZEN):
    model = build_model("tiny_test", regime, seed=0)
    print(f"{regime.value}: {trainable_parameter_count(model)} trainable parameters")
    model, history = train(model, train_set, val_set, transforms, cfg)
    for r in history.records:
        print(f"  epoch {r.epoch:2d}  loss {r.train_loss:9.1f}  train MAE {r.train_mae:6.2f}  val MAE {r.val_mae:6.2f}")
    print(f"  best epoch {history.best_epoch}, stopped early: {history.stopped_early}")

    result = evaluate(model, test_set, transforms)
    print(f"  test MAE {result.mae:.2f} months")
    emit_plot("history_curve", history, out / f"curve_{regime.value}.png")
    emit_plot("scatter", result, out / f"scatter_{regime.value}.png")
    results.append(RunResult("tiny_test", regime, result, history))

print()
print(render_comparison_table(results).to_markdown())
