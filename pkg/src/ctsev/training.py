"""Split planning, balanced sampling, and the per-split training loop.

The dataset is partitioned into several independent stratified train/val
splits (fresh shuffles, not folds of one partition). Each split trains two
encoder variants with a severity-balanced sampler: draws are weighted by the
inverse occurrence of the severe bit, with replacement, and one epoch is as
many draws as there are training subjects.

All randomness is derived from the experiment seed per (component, split,
variant), so the same seed, data and config reproduce every checkpoint bit
for bit.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .augment import AugConfig, AugSet, apply_default, apply_strong, center_crop, mixup_pair
from .metrics import ScoredCase, roc_auc
from .model import (
    EncoderConfig,
    ModelParams,
    init_params,
    loss_and_grads,
    map_params,
    predict_stack,
    save_checkpoint,
    sgd_step,
    variant_a,
    variant_b,
    zeros_like_params,
)
from .preprocess import SliceStack, WindowSpec, preprocess_volume
from .seeding import derive_rng
from .volume_io import LabeledCase, load_volume, read_labels_file


class TooFewSubjects(ValueError):
    """A label class has fewer than two members; stratified splits need both sides."""


class EmptyInput(ValueError):
    """An operation received zero subjects."""


class DivergedLoss(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    n_splits: int
    val_fraction: float
    seed: int
    assignments: tuple[SplitAssignment, ...]


def make_splits(
    cases: Sequence[LabeledCase],
    n_splits: int = 5,
    val_fraction: float = 0.2,
    seed: int = 0,
) -> SplitPlan:
    """n_splits independent stratified train/val partitions.

    Stratification is by the (severe, covid_positive) class; every class
    present in the data lands in both halves of every split, which keeps the
    class mix of validation sets within a couple of points of the full set.
    """
    if not cases:
        raise EmptyInput("no subjects to split")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if n_splits < 1:
        raise ValueError("n_splits must be positive")

    groups: dict[tuple[int, int], list[str]] = {}
    for c in cases:
        groups.setdefault((c.severe, c.covid_positive), []).append(c.subject_id)
    for key, ids in groups.items():
        ids.sort()
        if len(ids) < 2:
            raise TooFewSubjects(f"class {key} has only {len(ids)} subject(s)")

    splits = []
    for s in range(n_splits):
        rng = derive_rng(seed, "split", s)
        train: list[str] = []
        val: list[str] = []
        for key in sorted(groups):
            ids = groups[key]
            order = rng.permutation(len(ids))
            n_val = min(max(1, round(val_fraction * len(ids))), len(ids) - 1)
            shuffled = [ids[i] for i in order]
            val.extend(shuffled[:n_val])
            train.extend(shuffled[n_val:])
        splits.append(SplitAssignment(tuple(sorted(train)), tuple(sorted(val))))
    return SplitPlan(
        n_splits=n_splits, val_fraction=val_fraction, seed=seed, assignments=tuple(splits)
    )


def balanced_weights(cases: Sequence[LabeledCase]) -> dict[str, float]:
    """Per-subject weight = 1 / count(subject's severity class)."""
    if not cases:
        raise EmptyInput("no subjects to weight")
    counts = {0: 0, 1: 0}
    for c in cases:
        counts[c.severe] += 1
    return {c.subject_id: 1.0 / counts[c.severe] for c in cases}


def weighted_draw(
    weights: Mapping[str, float], n: int, rng: np.random.Generator
) -> list[str]:
    """n draws with replacement, probability proportional to weight."""
    if not weights:
        raise EmptyInput("no subjects to draw from")
    if n < 1:
        raise ValueError("n must be positive")
    ids = sorted(weights)
    p = np.array([weights[i] for i in ids], dtype=np.float64)
    if not np.isfinite(p).all() or p.min() <= 0.0:
        raise ValueError("weights must be positive and finite")
    p /= p.sum()
    return [str(s) for s in rng.choice(np.array(ids), size=n, replace=True, p=p)]


@dataclass
class TrainerConfig:
    """Everything train_split needs besides the data itself."""

    aug: AugConfig
    encoder_a: EncoderConfig
    encoder_b: EncoderConfig
    window: WindowSpec = WindowSpec()
    n_slices: int = 32
    pre_crop_hw: tuple[int, int] = (256, 256)
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 4

    def __post_init__(self) -> None:
        if self.encoder_a.in_hw != self.aug.crop_hw or self.encoder_b.in_hw != self.aug.crop_hw:
            raise ValueError(
                f"encoder input sizes {self.encoder_a.in_hw}/{self.encoder_b.in_hw} "
                f"must equal the crop size {self.aug.crop_hw}"
            )
        if self.pre_crop_hw[0] < self.aug.crop_hw[0] or self.pre_crop_hw[1] < self.aug.crop_hw[1]:
            raise ValueError("working resolution smaller than the crop size")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"bad optimizer settings lr={self.lr}, momentum={self.momentum}")
        if self.epochs < 0 or self.batch_size < 1 or self.n_slices < 1:
            raise ValueError("epochs must be >= 0, batch_size and n_slices >= 1")

    def pipeline_meta(self) -> dict:
        return {
            "window_level": self.window.level,
            "window_width": self.window.width,
            "n_slices": self.n_slices,
            "pre_crop_hw": list(self.pre_crop_hw),
        }


def default_trainer_config(
    crop_hw: tuple[int, int] = (224, 224),
    pre_crop_hw: tuple[int, int] = (256, 256),
    set_id: AugSet = AugSet.DEFAULT_STRONG_MIXUP,
    **kwargs,
) -> TrainerConfig:
    aug = AugConfig(crop_hw=crop_hw, set_id=set_id)
    return TrainerConfig(
        aug=aug,
        encoder_a=variant_a(crop_hw),
        encoder_b=variant_b(crop_hw),
        pre_crop_hw=pre_crop_hw,
        **kwargs,
    )


@dataclass
class EpochLog:
    variant: str
    epoch: int
    loss: float
    auc_severity: float
    auc_covid: float


@dataclass
class SplitResult:
    split_index: int
    params_a: ModelParams
    params_b: ModelParams
    velocity_a: ModelParams
    velocity_b: ModelParams
    auc_a: tuple[float, float]        # final per-variant val (severity, covid)
    auc_b: tuple[float, float]
    auc: tuple[float, float]          # val AUC of the two variants' averaged probs
    history: list[EpochLog] = field(default_factory=list)


def load_training_stacks(
    data_dir: str | Path, cases: Sequence[LabeledCase], cfg: TrainerConfig
) -> dict[str, SliceStack]:
    """Parse and preprocess every subject once; volumes live as <id>.mha."""
    data_dir = Path(data_dir)
    stacks = {}
    for case in cases:
        volume = load_volume(data_dir / f"{case.subject_id}.mha")
        stacks[case.subject_id] = preprocess_volume(
            volume, cfg.window, cfg.n_slices, cfg.pre_crop_hw
        )
    return stacks


def _training_example(
    sid: str,
    stacks: Mapping[str, SliceStack],
    labels: Mapping[str, LabeledCase],
    weights: Mapping[str, float],
    cfg: TrainerConfig,
    rng_sampler: np.random.Generator,
    rng_aug: np.random.Generator,
) -> tuple[SliceStack, tuple[float, float]]:
    set_id = cfg.aug.set_id
    augment = apply_strong if set_id.uses_strong else apply_default
    x = augment(stacks[sid], cfg.aug, rng_aug)
    y = (float(labels[sid].severe), float(labels[sid].covid_positive))
    if set_id.uses_mixup:
        partner = weighted_draw(weights, 1, rng_sampler)[0]
        x2 = augment(stacks[partner], cfg.aug, rng_aug)
        y2 = (float(labels[partner].severe), float(labels[partner].covid_positive))
        x, y = mixup_pair(x, y, x2, y2, cfg.aug.mixup_alpha, rng_aug)
    return x, y


def _val_scores(
    params: ModelParams,
    val_cases: Sequence[LabeledCase],
    stacks: Mapping[str, SliceStack],
    cfg: TrainerConfig,
) -> dict[str, tuple[float, float]]:
    # TTA at validation time only for the recipe that enables it; the other
    # recipes score a plain center crop
    if cfg.aug.set_id.uses_tta:
        from .ensemble import predict_with_tta

        return {
            c.subject_id: predict_with_tta(stacks[c.subject_id], params, cfg.aug.crop_hw)
            for c in val_cases
        }
    return {
        c.subject_id: predict_stack(center_crop(stacks[c.subject_id], cfg.aug.crop_hw), params)
        for c in val_cases
    }


def _aucs_from_scores(
    scores: Mapping[str, tuple[float, float]], val_cases: Sequence[LabeledCase]
) -> tuple[float, float]:
    severity = [
        ScoredCase(c.subject_id, scores[c.subject_id][0], c.severe)
        for c in val_cases
        if c.covid_positive
    ]
    covid = [ScoredCase(c.subject_id, scores[c.subject_id][1], c.covid_positive) for c in val_cases]
    return roc_auc(severity), roc_auc(covid)


def train_split(
    split_index: int,
    assignment: SplitAssignment,
    cases: Sequence[LabeledCase],
    cfg: TrainerConfig,
    seed: int,
    stacks: Mapping[str, SliceStack] | None = None,
    data_dir: str | Path | None = None,
) -> SplitResult:
    """Train both encoder variants on one split; fully seed-deterministic.

    Preprocessed stacks can be passed in to share work across splits;
    otherwise they are loaded from data_dir.
    """
    if stacks is None:
        if data_dir is None:
            raise ValueError("need either preloaded stacks or a data_dir")
        stacks = load_training_stacks(data_dir, cases, cfg)
    labels = {c.subject_id: c for c in cases}
    train_cases = [labels[sid] for sid in assignment.train_ids]
    val_cases = [labels[sid] for sid in assignment.val_ids]
    if not train_cases or not val_cases:
        raise EmptyInput(f"split {split_index} has an empty half")
    weights = balanced_weights(train_cases)

    history: list[EpochLog] = []
    trained: dict[str, ModelParams] = {}
    velocities: dict[str, ModelParams] = {}
    final_aucs: dict[str, tuple[float, float]] = {}
    val_scores: dict[str, dict[str, tuple[float, float]]] = {}

    for variant, enc in (("A", cfg.encoder_a), ("B", cfg.encoder_b)):
        params = init_params(enc, derive_rng(seed, "init", split_index, variant))
        velocity = None
        rng_sampler = derive_rng(seed, "sampler", split_index, variant)
        rng_aug = derive_rng(seed, "aug", split_index, variant)

        for epoch in range(cfg.epochs):
            draw = weighted_draw(weights, len(train_cases), rng_sampler)
            losses = []
            batch_grads: ModelParams | None = None
            batch_n = 0
            for sid in draw:
                x, y = _training_example(
                    sid, stacks, labels, weights, cfg, rng_sampler, rng_aug
                )
                loss, grads = loss_and_grads(x, y, params)
                if not np.isfinite(loss):
                    raise DivergedLoss(
                        f"split {split_index} variant {variant} epoch {epoch}: loss={loss}"
                    )
                losses.append(loss)
                batch_grads = (
                    grads if batch_grads is None else map_params(np.add, batch_grads, grads)
                )
                batch_n += 1
                if batch_n == cfg.batch_size:
                    mean_grads = map_params(lambda g: g / batch_n, batch_grads)
                    params, velocity = sgd_step(params, mean_grads, cfg.lr, cfg.momentum, velocity)
                    batch_grads, batch_n = None, 0
            if batch_n:
                mean_grads = map_params(lambda g: g / batch_n, batch_grads)
                params, velocity = sgd_step(params, mean_grads, cfg.lr, cfg.momentum, velocity)

            scores = _val_scores(params, val_cases, stacks, cfg)
            auc_sev, auc_cov = _aucs_from_scores(scores, val_cases)
            history.append(
                EpochLog(variant, epoch, float(np.mean(losses)), auc_sev, auc_cov)
            )

        scores = _val_scores(params, val_cases, stacks, cfg)
        final_aucs[variant] = _aucs_from_scores(scores, val_cases)
        val_scores[variant] = scores
        trained[variant] = params
        velocities[variant] = velocity if velocity is not None else zeros_like_params(params)

    combined = {
        sid: (
            0.5 * (val_scores["A"][sid][0] + val_scores["B"][sid][0]),
            0.5 * (val_scores["A"][sid][1] + val_scores["B"][sid][1]),
        )
        for sid in (c.subject_id for c in val_cases)
    }
    auc_pair = _aucs_from_scores(combined, val_cases)

    return SplitResult(
        split_index=split_index,
        params_a=trained["A"],
        params_b=trained["B"],
        velocity_a=velocities["A"],
        velocity_b=velocities["B"],
        auc_a=final_aucs["A"],
        auc_b=final_aucs["B"],
        auc=auc_pair,
        history=history,
    )


def training_log_csv(results: Sequence[SplitResult]) -> bytes:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["split", "variant", "epoch", "loss", "auc_severity", "auc_covid"])
    for res in results:
        for row in res.history:
            writer.writerow(
                [res.split_index + 1, row.variant, row.epoch, repr(row.loss),
                 repr(row.auc_severity), repr(row.auc_covid)]
            )
    return out.getvalue().encode("utf-8")


def fit_bundle(
    data_dir: str | Path,
    out_dir: str | Path,
    cfg: TrainerConfig,
    n_splits: int = 5,
    val_fraction: float = 0.2,
    seed: int = 0,
    cases: Sequence[LabeledCase] | None = None,
    stacks: Mapping[str, SliceStack] | None = None,
) -> list[SplitResult]:
    """Train every (split, variant) pair and write the checkpoint bundle.

    Layout: <out_dir>/split<i>/variant<A|B>.ckpt plus logs/training_log.csv.
    """
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    if cases is None:
        cases = read_labels_file(data_dir / "labels.csv")
    if stacks is None:
        stacks = load_training_stacks(data_dir, cases, cfg)
    plan = make_splits(cases, n_splits=n_splits, val_fraction=val_fraction, seed=seed)

    results = []
    meta = cfg.pipeline_meta()
    for s, assignment in enumerate(plan.assignments):
        result = train_split(s, assignment, cases, cfg, seed, stacks=stacks)
        split_dir = out_dir / f"split{s + 1}"
        split_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(split_dir / "variantA.ckpt", result.params_a, result.velocity_a, meta)
        save_checkpoint(split_dir / "variantB.ckpt", result.params_b, result.velocity_b, meta)
        results.append(result)

    log_dir = out_dir / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    (log_dir / "training_log.csv").write_bytes(training_log_csv(results))
    return results
