"""Command-line interface.

Subcommands: generate (synthetic phantom datasets), train (the split/variant
checkpoint bundle), predict (batch CSV, with or without TTA), evaluate
(AUCs from prediction + label CSVs). A JSON config file supplies run
settings; individual flags override config fields.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 partial batch
(some subjects in a predict run were skipped).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .augment import AugConfig, AugSet
from .ensemble import load_bundle, predict_batch, read_predictions_file
from .metrics import evaluate
from .model import DEFAULT_CHANNELS, EncoderConfig
from .phantom_gen import DatasetManifest, PhantomSpec, generate_dataset
from .preprocess import WindowSpec
from .training import TrainerConfig, fit_bundle, load_training_stacks
from .volume_io import read_labels_file

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_PARTIAL = 3

ABLATION_SETS = (
    AugSet.DEFAULT,
    AugSet.DEFAULT_STRONG,
    AugSet.DEFAULT_STRONG_MIXUP,
    AugSet.DEFAULT_STRONG_MIXUP_TTA,
)


@dataclass
class RunConfig:
    """One experiment's settings; JSON-serialisable, flag-overridable."""

    seed: int = 0
    n_splits: int = 5
    val_fraction: float = 0.2
    n_slices: int = 32
    pre_crop_hw: tuple[int, int] = (256, 256)
    crop_hw: tuple[int, int] = (224, 224)
    window_level: float = -600.0
    window_width: float = 1500.0
    aug_set: AugSet = AugSet.DEFAULT_STRONG_MIXUP
    brightness: float = 0.5
    contrast: float = 0.5
    saturation: float = 0.4
    gamma_range: tuple[float, float] = (0.8, 1.25)
    rotate_limit_deg: float = 30.0
    median_kernel: int = 3
    mixup_alpha: float = 0.8
    channels_a: tuple[int, ...] = DEFAULT_CHANNELS["A"]
    channels_b: tuple[int, ...] = DEFAULT_CHANNELS["B"]
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 4
    tta: bool = True

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg = cls()
        window = doc.get("window", {})
        aug = doc.get("aug", {})
        opt = doc.get("optimizer", {})
        fields = {
            "seed": doc.get("seed"),
            "n_splits": doc.get("n_splits"),
            "val_fraction": doc.get("val_fraction"),
            "n_slices": doc.get("n_slices"),
            "pre_crop_hw": doc.get("pre_crop_hw"),
            "crop_hw": doc.get("crop_hw"),
            "window_level": window.get("level"),
            "window_width": window.get("width"),
            "aug_set": aug.get("set_id"),
            "brightness": aug.get("brightness"),
            "contrast": aug.get("contrast"),
            "saturation": aug.get("saturation"),
            "gamma_range": aug.get("gamma_range"),
            "rotate_limit_deg": aug.get("rotate_limit_deg"),
            "median_kernel": aug.get("median_kernel"),
            "mixup_alpha": aug.get("mixup_alpha"),
            "channels_a": (doc.get("encoder_a") or {}).get("channels"),
            "channels_b": (doc.get("encoder_b") or {}).get("channels"),
            "lr": opt.get("lr"),
            "momentum": opt.get("momentum"),
            "epochs": opt.get("epochs"),
            "batch_size": opt.get("batch_size"),
            "tta": doc.get("tta"),
        }
        for name, value in fields.items():
            if value is None:
                continue
            if name == "aug_set":
                value = AugSet(value)
            elif name in ("pre_crop_hw", "crop_hw", "gamma_range", "channels_a", "channels_b"):
                value = tuple(value)
            cfg = replace(cfg, **{name: value})
        return cfg

    def aug_config(self, set_id: AugSet | None = None) -> AugConfig:
        return AugConfig(
            crop_hw=self.crop_hw,
            brightness=self.brightness,
            contrast=self.contrast,
            saturation=self.saturation,
            gamma_range=self.gamma_range,
            rotate_limit_deg=self.rotate_limit_deg,
            median_kernel=self.median_kernel,
            mixup_alpha=self.mixup_alpha,
            set_id=set_id if set_id is not None else self.aug_set,
        )

    def trainer_config(self, set_id: AugSet | None = None) -> TrainerConfig:
        return TrainerConfig(
            aug=self.aug_config(set_id),
            encoder_a=EncoderConfig(self.crop_hw, self.channels_a, "A"),
            encoder_b=EncoderConfig(self.crop_hw, self.channels_b, "B"),
            window=WindowSpec(self.window_level, self.window_width),
            n_slices=self.n_slices,
            pre_crop_hw=self.pre_crop_hw,
            lr=self.lr,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
        )


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for name in ("seed", "n_splits", "val_fraction", "epochs"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "aug_set", None) is not None:
        overrides["aug_set"] = AugSet(args.aug_set)
    return replace(cfg, **overrides) if overrides else cfg


def cmd_generate(args: argparse.Namespace) -> int:
    spec = PhantomSpec(
        dims=tuple(args.dims),
        n_cases=args.cases,
        severe_fraction=args.severe_fraction,
        positive_fraction=args.positive_fraction,
        seed=args.seed,
    )
    manifest = generate_dataset(spec, args.out)
    print(
        f"wrote {manifest.n_cases} volumes to {args.out} "
        f"({manifest.n_severe} severe, {manifest.n_positive} positive)"
    )
    return EXIT_OK


def _print_split_summaries(results) -> None:
    for res in results:
        print(
            f"split {res.split_index + 1}: "
            f"AUC_severity={res.auc[0]:.4f} AUC_covid={res.auc[1]:.4f}"
        )


def _run_ablation(args: argparse.Namespace, run_cfg: RunConfig) -> int:
    from .report import save_ablation_chart

    out_dir = Path(args.out)
    data_dir = Path(args.data)
    cases = read_labels_file(data_dir / "labels.csv")
    # stacks are augmentation-independent, so preprocess once for all rows
    stacks = load_training_stacks(data_dir, cases, run_cfg.trainer_config())

    rows = []
    for set_id in ABLATION_SETS:
        cfg = run_cfg.trainer_config(set_id)
        results = fit_bundle(
            data_dir,
            out_dir / f"aug_{set_id.value}",
            cfg,
            n_splits=run_cfg.n_splits,
            val_fraction=run_cfg.val_fraction,
            seed=run_cfg.seed,
            cases=cases,
            stacks=stacks,
        )
        rows.append(
            {
                "aug_set": set_id.value,
                "auc_severity_a": sum(r.auc_a[0] for r in results) / len(results),
                "auc_severity_b": sum(r.auc_b[0] for r in results) / len(results),
                "auc_covid_a": sum(r.auc_a[1] for r in results) / len(results),
                "auc_covid_b": sum(r.auc_b[1] for r in results) / len(results),
            }
        )

    out = io.StringIO()
    writer = csv.DictWriter(
        out,
        fieldnames=["aug_set", "auc_severity_a", "auc_severity_b", "auc_covid_a", "auc_covid_b"],
        lineterminator="\n",
    )
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.csv").write_text(out.getvalue(), encoding="utf-8")
    save_ablation_chart(rows, out_dir / "ablation.png")

    print(f"{'aug_set':<28} {'sevA':>8} {'sevB':>8} {'covA':>8} {'covB':>8}")
    for row in rows:
        print(
            f"{row['aug_set']:<28} {row['auc_severity_a']:>8.4f} {row['auc_severity_b']:>8.4f} "
            f"{row['auc_covid_a']:>8.4f} {row['auc_covid_b']:>8.4f}"
        )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run_cfg = _load_run_config(args)
    if args.ablation:
        return _run_ablation(args, run_cfg)

    from .report import save_training_curves

    out_dir = Path(args.out)
    results = fit_bundle(
        args.data,
        out_dir,
        run_cfg.trainer_config(),
        n_splits=run_cfg.n_splits,
        val_fraction=run_cfg.val_fraction,
        seed=run_cfg.seed,
    )
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    save_training_curves(results, fig_dir / "loss_curves.png")
    _print_split_summaries(results)
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle, tta_enabled=not args.no_tta)
    data_dir = Path(args.data)
    manifest_path = Path(args.manifest) if args.manifest else data_dir / "manifest.json"
    if manifest_path.exists():
        manifest = DatasetManifest.load(manifest_path)
    else:
        # a bare directory of volumes: take every .mha in name order
        volumes = [(p.stem, p.name) for p in sorted(data_dir.glob("*.mha"))]
        manifest = DatasetManifest(
            volumes=volumes, labels_file="", n_cases=len(volumes), n_severe=0, n_positive=0
        )
    predictions = predict_batch(manifest, bundle, args.out, data_dir=data_dir)
    print(f"wrote {len(predictions)}/{len(manifest.volumes)} predictions to {args.out}")
    if len(predictions) < len(manifest.volumes):
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    predictions = read_predictions_file(args.predictions)
    labels = read_labels_file(args.labels)
    among_positives = not args.severity_all_subjects
    auc_severity, auc_covid = evaluate(
        predictions, labels, severity_among_positives=among_positives
    )
    print(f"AUC_severity={auc_severity:.4f} AUC_covid={auc_covid:.4f}")

    if args.report_dir:
        from .report import save_roc_curves

        report_dir = Path(args.report_dir)
        report_dir.mkdir(parents=True, exist_ok=True)
        (report_dir / "metrics.csv").write_text(
            "auc_severity,auc_covid\n" f"{auc_severity!r},{auc_covid!r}\n", encoding="utf-8"
        )
        by_id = {p.subject_id: p for p in predictions}
        covid = ([c.covid_positive for c in labels], [by_id[c.subject_id].prob_covid for c in labels])
        sev_cases = [c for c in labels if c.covid_positive or not among_positives]
        severity = ([c.severe for c in sev_cases], [by_id[c.subject_id].prob_severe for c in sev_cases])
        save_roc_curves({"severity": severity, "covid": covid}, report_dir / "roc_curves.png")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctsev",
        description="COVID severity prediction from chest CT with a slice-max ensemble.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic phantom dataset")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--cases", type=int, default=100)
    p_gen.add_argument("--severe", dest="severe_fraction", type=float, default=0.15,
                       help="fraction of cases that are severe")
    p_gen.add_argument("--positive", dest="positive_fraction", type=float, default=0.5,
                       help="fraction of cases that are covid positive")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--dims", type=int, nargs=3, default=[64, 64, 48],
                       metavar=("W", "H", "D"))
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train the split/variant checkpoint bundle")
    p_train.add_argument("--data", required=True, help="dataset directory (volumes + labels.csv)")
    p_train.add_argument("--out", required=True, help="bundle output directory")
    p_train.add_argument("--config", help="JSON run config")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--n-splits", dest="n_splits", type=int)
    p_train.add_argument("--val-fraction", dest="val_fraction", type=float)
    p_train.add_argument("--aug-set", dest="aug_set",
                         choices=[s.value for s in AugSet])
    p_train.add_argument("--ablation", action="store_true",
                         help="sweep all four augmentation sets and emit the comparison table")
    p_train.set_defaults(func=cmd_train)

    p_pred = sub.add_parser("predict", help="batch-predict a directory of volumes")
    p_pred.add_argument("--bundle", required=True, help="trained bundle directory")
    p_pred.add_argument("--data", required=True, help="directory of .mha volumes")
    p_pred.add_argument("--manifest", help="explicit manifest.json (defaults to data dir)")
    p_pred.add_argument("--out", required=True, help="output prediction CSV")
    p_pred.add_argument("--no-tta", action="store_true", help="single center-crop view")
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("evaluate", help="score prediction CSV against labels")
    p_eval.add_argument("--predictions", required=True)
    p_eval.add_argument("--labels", required=True)
    p_eval.add_argument("--severity-all-subjects", action="store_true",
                        help="score severity over all subjects, not just positives")
    p_eval.add_argument("--report-dir", help="also write metrics.csv and ROC figures here")
    p_eval.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
