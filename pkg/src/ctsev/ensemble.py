"""Bundle loading, test-time-augmented prediction, and prediction CSVs.

A bundle is the directory layout written by training: split<i>/variantA.ckpt
and split<i>/variantB.ckpt. Prediction averages probabilities (never logits)
at every level: the eight TTA views of one model, then the two variants
within a split, then the splits. With equal counts throughout, this equals
the flat mean over all constituent models, which keeps the averaging order
irrelevant.
"""

from __future__ import annotations

import csv
import io
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import center_crop, tta_views
from .model import ModelParams, load_checkpoint, predict_stack
from .phantom_gen import DatasetManifest
from .preprocess import SliceStack, WindowSpec, preprocess_volume
from .volume_io import Volume, VolumeFormatError, load_volume

logger = logging.getLogger(__name__)

PREDICTIONS_CSV_HEADER = ("PatientID", "probCOVID", "probSevere")

_SPLIT_DIR = re.compile(r"^split(\d+)$")


@dataclass(frozen=True)
class Prediction:
    subject_id: str
    prob_severe: float
    prob_covid: float


@dataclass
class EnsembleBundle:
    """All (split, variant) checkpoints plus the shared preprocessing recipe."""

    splits: list[dict[str, ModelParams]]   # each {"A": params, "B": params}
    window: WindowSpec
    n_slices: int
    pre_crop_hw: tuple[int, int]
    tta_enabled: bool = True

    def __post_init__(self) -> None:
        if not self.splits:
            raise ValueError("bundle has no splits")
        sizes = {
            p.config.in_hw for split in self.splits for p in split.values()
        }
        if len(sizes) != 1:
            raise ValueError(f"checkpoints disagree on input size: {sorted(sizes)}")
        for i, split in enumerate(self.splits):
            if set(split) != {"A", "B"}:
                raise ValueError(f"split {i + 1} is missing a variant: {sorted(split)}")

    @property
    def crop_hw(self) -> tuple[int, int]:
        return self.splits[0]["A"].config.in_hw

    @property
    def n_models(self) -> int:
        return 2 * len(self.splits)


def load_bundle(bundle_dir: str | Path, tta_enabled: bool = True) -> EnsembleBundle:
    bundle_dir = Path(bundle_dir)
    split_dirs = []
    for entry in bundle_dir.iterdir() if bundle_dir.is_dir() else []:
        m = _SPLIT_DIR.match(entry.name)
        if m and entry.is_dir():
            split_dirs.append((int(m.group(1)), entry))
    if not split_dirs:
        raise ValueError(f"no split directories under {bundle_dir}")
    split_dirs.sort()

    splits = []
    metas = []
    for _, entry in split_dirs:
        split = {}
        for variant in ("A", "B"):
            ckpt = entry / f"variant{variant}.ckpt"
            if not ckpt.is_file():
                raise ValueError(f"incomplete split: {entry.name} has no variant{variant}.ckpt")
            params, _, meta = load_checkpoint(ckpt)
            split[variant] = params
            metas.append(meta)
        splits.append(split)
    first = metas[0]
    if any(m != first for m in metas):
        raise ValueError("checkpoints disagree on the preprocessing recipe")
    return EnsembleBundle(
        splits=splits,
        window=WindowSpec(first["window_level"], first["window_width"]),
        n_slices=int(first["n_slices"]),
        pre_crop_hw=tuple(first["pre_crop_hw"]),
        tta_enabled=tta_enabled,
    )


def predict_with_tta(
    stack: SliceStack,
    params: ModelParams,
    crop_hw: tuple[int, int],
    tta_enabled: bool = True,
) -> tuple[float, float]:
    """Mean probability over the eight deterministic views of one model."""
    if not tta_enabled:
        return predict_stack(center_crop(stack, crop_hw), params)
    probs = np.array([predict_stack(v, params) for v in tta_views(stack, crop_hw)])
    mean = probs.mean(axis=0)
    return float(mean[0]), float(mean[1])


def ensemble_average(probs) -> np.ndarray:
    """(n_splits, n_variants, 2) probabilities -> final (2,).

    Averages variants within each split, then the split means; with equal
    variant counts this equals the flat mean of all models.
    """
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"expected (n_splits, n_variants, 2), got {arr.shape}")
    return arr.mean(axis=1).mean(axis=0)


def predict_subject(
    volume: Volume,
    bundle: EnsembleBundle,
    window: WindowSpec | None = None,
    n_slices: int | None = None,
) -> Prediction:
    """Ensemble prediction for one volume."""
    stack = preprocess_volume(
        volume,
        window if window is not None else bundle.window,
        n_slices if n_slices is not None else bundle.n_slices,
        bundle.pre_crop_hw,
    )
    probs = [
        [
            predict_with_tta(stack, split[variant], bundle.crop_hw, bundle.tta_enabled)
            for variant in ("A", "B")
        ]
        for split in bundle.splits
    ]
    final = ensemble_average(probs)
    return Prediction(volume.subject_id, prob_severe=float(final[0]), prob_covid=float(final[1]))


def write_predictions(path: str | Path, predictions: Sequence[Prediction]) -> None:
    out = io.StringIO()
    out.write(",".join(PREDICTIONS_CSV_HEADER) + "\n")
    for p in predictions:
        out.write(f"{p.subject_id},{p.prob_covid!r},{p.prob_severe!r}\n")
    Path(path).write_bytes(out.getvalue().encode("utf-8"))


def read_predictions(data: bytes) -> list[Prediction]:
    text = data.decode("utf-8", errors="replace")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(cell.strip() for cell in rows[0]) != PREDICTIONS_CSV_HEADER:
        raise ValueError("expected header PatientID,probCOVID,probSevere")
    predictions = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ValueError(f"line {line_no}: expected 3 fields, got {len(row)}")
        try:
            prob_covid = float(row[1])
            prob_severe = float(row[2])
        except ValueError:
            raise ValueError(f"line {line_no}: non-numeric probability") from None
        for value in (prob_covid, prob_severe):
            if not np.isfinite(value) or not 0.0 <= value <= 1.0:
                raise ValueError(f"line {line_no}: probability {value!r} outside [0, 1]")
        predictions.append(Prediction(row[0].strip(), prob_severe=prob_severe, prob_covid=prob_covid))
    return predictions


def read_predictions_file(path: str | Path) -> list[Prediction]:
    return read_predictions(Path(path).read_bytes())


def predict_batch(
    manifest: DatasetManifest | str | Path,
    bundle: EnsembleBundle,
    out_path: str | Path,
    data_dir: str | Path | None = None,
) -> list[Prediction]:
    """Predict every subject in a dataset manifest and write the CSV.

    `manifest` is either a manifest.json path (volumes resolve against its
    directory) or a DatasetManifest plus an explicit data_dir. Subjects whose
    volume fails to load or parse are logged and skipped; the returned list
    (and the CSV) keep manifest order for the rest. Callers can detect
    partial failure by comparing lengths against the manifest.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest_path = Path(manifest)
        manifest = DatasetManifest.load(manifest_path)
        data_dir = manifest_path.parent
    if data_dir is None:
        raise ValueError("an in-memory manifest needs an explicit data_dir")
    data_dir = Path(data_dir)
    predictions = []
    for subject_id, fname in manifest.volumes:
        try:
            volume = load_volume(data_dir / fname)
            predictions.append(predict_subject(volume, bundle))
        except (OSError, VolumeFormatError) as exc:
            logger.warning("skipping %s: %s", subject_id, exc)
    write_predictions(out_path, predictions)
    return predictions
