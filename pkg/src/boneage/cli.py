"""Command line front end: ``boneage {stats,synth,split,train,evaluate,compare}``.

Exit codes: 0 success, 2 input or configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import data, engine, models, reporting
from .errors import BoneAgeError, NonFiniteLoss
from .transforms import AugmentParams, PreprocessSpec, TransformConfig

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3
EFFECTIVE_CONFIG = "effective_config.json"

log = logging.getLogger("boneage")


class ConfigError(BoneAgeError, ValueError):
    pass


@dataclass
class RunConfig:
    csv: str | None = None
    images: str | None = None
    out: str = "runs"
    backbone: str = "tiny_test"
    regime: str = "full"
    epochs: int = 15
    patience: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    min_delta: float = 0.0
    seed: int = 42
    strict: bool = True
    pretrained: bool | None = None
    split: str | None = None
    split_sizes: dict = field(default_factory=lambda: dict(data.DEFAULT_SPLIT_SIZES))
    preprocess: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    head: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**values)

    def train_config(self) -> engine.TrainConfig:
        return engine.TrainConfig(
            max_epochs=self.epochs, patience=self.patience, batch_size=self.batch_size, learning_rate=self.lr,
            beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon, seed=self.seed, min_delta=self.min_delta,
        )

    def transform_config(self) -> TransformConfig:
        base = models.get_backbone(self.backbone).input_spec.to_json()
        base.update(self.preprocess)
        if base.get("channel_means") is not None:
            base["channel_means"] = tuple(base["channel_means"])
        aug = AugmentParams().to_json()
        aug.update(self.augment)
        aug["zoom_range"] = tuple(aug["zoom_range"])
        return TransformConfig(PreprocessSpec(**base), AugmentParams(**aug))

    def head_config(self) -> models.HeadConfig:
        return models.HeadConfig(**{**models.HeadConfig().to_json(), **self.head})

    def resolved(self) -> dict:
        """Every parameter with defaults filled in, as written to effective_config.json."""
        try:
            tc = self.transform_config()
            head = self.head_config()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        out = dataclasses.asdict(self)
        out["regime"] = models.Regime.parse(self.regime).value
        out["preprocess"] = tc.preprocess.to_json()
        out["augment"] = tc.augment.to_json()
        out["head"] = head.to_json()
        return out

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / f"{self.backbone}_{models.Regime.parse(self.regime).value}"


_FLAG_TO_KEY = {
    "csv": "csv", "images": "images", "out": "out", "backbone": "backbone", "regime": "regime",
    "epochs": "epochs", "patience": "patience", "batch_size": "batch_size", "lr": "lr", "seed": "seed",
    "split": "split", "min_delta": "min_delta",
}


def resolve_config(args) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    cfg = RunConfig.from_mapping(values)
    for flag, key in _FLAG_TO_KEY.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "random_init", False):
        cfg.pretrained = False
    if getattr(args, "no_strict", False):
        cfg.strict = False
    for key in ("train", "val", "test"):
        value = getattr(args, f"n_{key}", None)
        if value is not None:
            cfg.split_sizes = {**cfg.split_sizes, key: value}
    return cfg


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def _manifest(cfg: RunConfig) -> data.DatasetManifest:
    if not cfg.csv or not cfg.images:
        raise ConfigError("--csv and --images are required")
    return data.load_manifest(cfg.csv, cfg.images, strict=cfg.strict)


def _split(cfg: RunConfig, manifest: data.DatasetManifest) -> data.SplitAssignment:
    if cfg.split:
        return data.SplitAssignment.from_json(json.loads(Path(cfg.split).read_text()))
    return data.make_splits(manifest, cfg.split_sizes, cfg.seed)


def cmd_stats(args) -> int:
    manifest = data.load_manifest(args.csv, args.images, strict=not args.no_strict)
    stats = data.compute_stats(manifest, args.bin_width)
    out = Path(args.out)
    _write_json(out / "stats.json", stats.to_json())
    reporting.emit_plot("age_distribution", stats, out / "age_distribution.png")
    reporting.emit_plot("age_distribution", stats, out / "age_distribution_by_gender.png", by_gender=True)
    reporting.emit_plot("gender_distribution", stats, out / "gender_distribution.png")
    if stats.total and args.band_width % args.bin_width == 0:
        reporting.write_bias_report(stats, band_width=args.band_width, out_dir=out)
    print(out / "stats.json")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        manifest = data.build_synthetic_dataset(args.out, args.n, args.seed)
    except OSError as exc:
        print(f"error: cannot write synthetic dataset: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(Path(args.out) / "manifest.csv")
    log.info("wrote %d synthetic records (%s)", len(manifest), manifest.source)
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = resolve_config(args)
    split = _split(cfg, _manifest(cfg))
    path = _write_json(Path(cfg.out) / "split.json", split.to_json())
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    effective = cfg.resolved()
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / EFFECTIVE_CONFIG, effective)

    manifest = _manifest(cfg)
    split = _split(cfg, manifest)
    _write_json(run_dir / "split.json", split.to_json())
    model = models.build_model(cfg.backbone, cfg.regime, cfg.head_config(), seed=cfg.seed, pretrained=cfg.pretrained)
    try:
        model, history = engine.train(model, manifest.subset(split.train_ids), manifest.subset(split.val_ids),
                                      cfg.transform_config(), cfg.train_config())
    except NonFiniteLoss as exc:
        if exc.history is not None:
            engine.write_history(exc.history, run_dir / "history.json", _echo(effective))
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    best = history.records[history.best_epoch]
    models.save_checkpoint(model, run_dir, best.epoch, best.val_mae, cfg.seed)
    engine.write_history(history, run_dir / "history.json", _echo(effective))
    reporting.emit_plot("history_curve", history, run_dir / "learning_curve.png",
                        title=f"{cfg.backbone} / {model.regime.value}: MAE months vs. Epochs")
    print(run_dir)
    return EXIT_OK


def _echo(effective: dict) -> dict:
    # output location is where the artifact lives, not a training parameter
    return {k: v for k, v in effective.items() if k != "out"}


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if args.config is None and (ckpt / EFFECTIVE_CONFIG).is_file():
        args.config = str(ckpt / EFFECTIVE_CONFIG)
    cfg = resolve_config(args)
    model, sidecar = models.load_checkpoint(ckpt)
    if cfg.backbone != sidecar["backbone_id"]:
        raise models.CheckpointMismatch(
            f"config names backbone {cfg.backbone!r} but the checkpoint holds {sidecar['backbone_id']!r}"
        )
    manifest = _manifest(cfg)
    if cfg.split is None and (ckpt / "split.json").is_file():
        cfg.split = str(ckpt / "split.json")
    split = _split(cfg, manifest)
    if not split.test_ids:
        raise ConfigError("the split has no test samples")
    result = engine.evaluate(model, manifest.subset(split.test_ids), cfg.transform_config(), cfg.batch_size)

    out = Path(args.eval_out) if args.eval_out else ckpt
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "predictions.csv")
    reporting.emit_plot("scatter", result, out / "scatter.png",
                        title=f"{sidecar['backbone_id']} / {sidecar['regime']}: actual vs. predicted (months)")
    _write_json(out / "metrics.json", {
        "backbone_id": sidecar["backbone_id"],
        "regime": sidecar["regime"],
        "mae_months": result.mae,
        "n": len(result.predictions),
        "config": _echo(cfg.resolved()),
    })
    print(f"MAE {result.mae:.2f} months over {len(result.predictions)} test images")
    return EXIT_OK


def cmd_compare(args) -> int:
    results = []
    for run_dir in args.run_dirs:
        path = Path(run_dir) / "metrics.json"
        try:
            metrics = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        evaluation = engine.EvalResult(mae=float(metrics["mae_months"]), predictions=[])
        pred_csv = Path(run_dir) / "predictions.csv"
        if pred_csv.is_file():
            evaluation = engine.EvalResult(mae=evaluation.mae, predictions=engine.EvalResult.read_csv(pred_csv).predictions)
        results.append(reporting.RunResult(metrics["backbone_id"], metrics["regime"], evaluation,
                                           config=metrics.get("config", {})))
    table = reporting.render_comparison_table(results)
    markdown = table.to_markdown()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.md").write_text(markdown)
        _write_json(out / "comparison.json", table.to_json())
    print(markdown, end="")
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--csv")
    p.add_argument("--images")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", help="split JSON to reuse instead of drawing a new one")
    p.add_argument("--train", dest="n_train", type=int, help="training split size")
    p.add_argument("--val", dest="n_val", type=int, help="validation split size")
    p.add_argument("--test", dest="n_test", type=int, help="test split size")
    p.add_argument("--no-strict", action="store_true", help="do not require every image file to exist")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boneage", description="Bone age regression experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="dataset statistics and distribution plots")
    p.add_argument("--csv", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bin-width", type=int, default=12)
    p.add_argument("--band-width", type=int, default=24)
    p.add_argument("--no-strict", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="write a synthetic brightness-coded dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="draw train/val/test splits")
    _add_run_flags(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one backbone under one regime")
    _add_run_flags(p)
    p.add_argument("--backbone", choices=[s.id for s in models.list_backbones()])
    p.add_argument("--regime", choices=["full", "frozen"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--min-delta", type=float)
    p.add_argument("--random-init", action="store_true", help="skip ImageNet weights")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True, help="run directory holding model.pt and model.json")
    _add_run_flags(p)
    p.add_argument("--backbone")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-out", help="where to write predictions (default: the checkpoint directory)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="comparison table across run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (BoneAgeError, ValueError, KeyError, OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
