"""Synthetic labeled chest-CT phantoms for end-to-end pipeline tests.

The geometry is deliberately crude: two ellipsoidal lungs inside a
soft-tissue torso on an air background, with spherical ground-glass-like
lesions in the lungs. Positive cases get a small lesion budget; severe cases
get several-fold more lesion volume, so both targets are learnable from tiny
volumes in minutes. Tissue values are jittered by +/-10 percent per case.

Every case is a pure function of (seed, index): datasets regenerate
bit-identically file by file, and cases can be produced in any order or in
parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import derive_rng
from .volume_io import LabeledCase, Volume, write_labels, write_mha

AIR_HU = -1024.0
TISSUE_HU = 40.0
LUNG_HU = -800.0
LESION_HU = -500.0

# after +/-10% value jitter, lesions stay in [-550, -450] and lungs in
# [-880, -720]; this band separates them for voxel counting
LESION_HU_BAND = (-620.0, -380.0)

# lesion budget per class: blob count and base radius as a fraction of the
# smallest volume dimension; the severe budget is several times the
# non-severe one in expectation, comfortably above the required 3x
_LESION_BLOBS = {"positive": 2, "severe": 6}
_LESION_RADIUS_FRAC = {"positive": 0.15, "severe": 0.18}

# anatomy positions/sizes wobble only a little; the +/-10% jitter applies to
# tissue values, and heavy geometric variation would drown the lesion signal
# at these tiny resolutions
_GEOMETRY_JITTER = 0.03

_SPACING = (0.7, 0.7, 1.4)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 48)   # (width, height, depth)
    n_cases: int = 100
    severe_fraction: float = 0.15
    positive_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise ValueError(f"dims must be three ints >= 16, got {self.dims}")
        if self.n_cases < 1:
            raise ValueError("n_cases must be positive")
        if not 0.0 <= self.severe_fraction <= self.positive_fraction <= 1.0:
            raise ValueError(
                "need 0 <= severe_fraction <= positive_fraction <= 1, got "
                f"{self.severe_fraction} / {self.positive_fraction}"
            )

    @property
    def n_severe(self) -> int:
        return int(round(self.n_cases * self.severe_fraction))

    @property
    def n_positive(self) -> int:
        return int(round(self.n_cases * self.positive_fraction))


@dataclass
class DatasetManifest:
    """Paths and counts for one generated dataset; stored as manifest.json."""

    volumes: list[tuple[str, str]]   # (subject_id, relative filename)
    labels_file: str
    n_cases: int
    n_severe: int
    n_positive: int

    @property
    def files(self) -> list[str]:
        return [fname for _, fname in self.volumes] + [self.labels_file]

    def save(self, path: str | Path) -> None:
        doc = {
            "volumes": [list(v) for v in self.volumes],
            "labels_file": self.labels_file,
            "n_cases": self.n_cases,
            "n_severe": self.n_severe,
            "n_positive": self.n_positive,
        }
        Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            volumes=[(s, f) for s, f in doc["volumes"]],
            labels_file=doc["labels_file"],
            n_cases=int(doc["n_cases"]),
            n_severe=int(doc["n_severe"]),
            n_positive=int(doc["n_positive"]),
        )


def _case_rank(spec: PhantomSpec, index: int) -> int:
    # a seed-derived permutation spreads the label classes evenly over
    # indices while keeping exact class counts and per-case determinism
    perm = derive_rng(spec.seed, "phantom-labels", spec.n_cases).permutation(spec.n_cases)
    return int(perm[index])


def subject_id_for(index: int) -> str:
    return f"case{index:05d}"


def generate_case(spec: PhantomSpec, index: int) -> tuple[Volume, LabeledCase]:
    """Deterministically build phantom number `index` for a PhantomSpec."""
    if not 0 <= index < spec.n_cases:
        raise IndexError(f"index {index} outside [0, {spec.n_cases})")
    rank = _case_rank(spec, index)
    severe = int(rank < spec.n_severe)
    positive = int(rank < spec.n_positive)

    rng = derive_rng(spec.seed, "phantom-case", index)
    jitter = lambda v: float(v * rng.uniform(0.9, 1.1))  # noqa: E731
    wobble = lambda v: float(  # noqa: E731
        v * rng.uniform(1.0 - _GEOMETRY_JITTER, 1.0 + _GEOMETRY_JITTER)
    )

    w, h, d = spec.dims
    # normalized coordinates, roughly [-1, 1] across each axis
    nz = ((np.arange(d) - (d - 1) / 2.0) / (d / 2.0))[:, None, None]
    ny = ((np.arange(h) - (h - 1) / 2.0) / (h / 2.0))[None, :, None]
    nx = ((np.arange(w) - (w - 1) / 2.0) / (w / 2.0))[None, None, :]

    hu = np.full((d, h, w), AIR_HU)
    torso = (nx / 0.82) ** 2 + (ny / 0.75) ** 2 + (nz / 0.95) ** 2 <= 1.0
    hu[torso] = jitter(TISSUE_HU)

    lung_value = jitter(LUNG_HU)
    lungs = np.zeros((d, h, w), dtype=bool)
    lung_geom = []
    for side in (-1.0, 1.0):
        cx = side * wobble(0.42)
        axes = (wobble(0.30), wobble(0.46), wobble(0.72))
        mask = (
            ((nx - cx) / axes[0]) ** 2 + (ny / axes[1]) ** 2 + (nz / axes[2]) ** 2 <= 1.0
        )
        lungs |= mask
        lung_geom.append((cx, axes))
    hu[lungs] = lung_value

    if positive:
        kind = "severe" if severe else "positive"
        base_radius = _LESION_RADIUS_FRAC[kind] * min(spec.dims)
        lesion_value = jitter(LESION_HU)
        vz = np.arange(d)[:, None, None]
        vy = np.arange(h)[None, :, None]
        vx = np.arange(w)[None, None, :]
        for _ in range(_LESION_BLOBS[kind]):
            cx, axes = lung_geom[int(rng.integers(0, 2))]
            # a uniform point inside the central 70% of the lung ellipsoid
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            reach = 0.7 * rng.uniform() ** (1.0 / 3.0)
            center_n = (
                cx + direction[0] * axes[0] * reach,
                direction[1] * axes[1] * reach,
                direction[2] * axes[2] * reach,
            )
            px = center_n[0] * (w / 2.0) + (w - 1) / 2.0
            py = center_n[1] * (h / 2.0) + (h - 1) / 2.0
            pz = center_n[2] * (d / 2.0) + (d - 1) / 2.0
            radius = jitter(base_radius)
            blob = (vx - px) ** 2 + (vy - py) ** 2 + (vz - pz) ** 2 <= radius**2
            hu[blob & lungs] = lesion_value

    hu_int = np.clip(np.rint(hu), -1024, 3071).astype(np.int16)
    subject_id = subject_id_for(index)
    volume = Volume(dims=spec.dims, spacing=_SPACING, hu=hu_int, subject_id=subject_id)
    return volume, LabeledCase(subject_id, severe=severe, covid_positive=positive)


def lesion_voxel_count(volume: Volume) -> int:
    """Voxels in the lesion HU band; exact for generated phantoms."""
    lo, hi = LESION_HU_BAND
    return int(np.count_nonzero((volume.hu >= lo) & (volume.hu <= hi)))


def generate_dataset(spec: PhantomSpec, out_dir: str | Path) -> DatasetManifest:
    """Write every case as <subject>.mha plus labels.csv and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    volumes: list[tuple[str, str]] = []
    labels: list[LabeledCase] = []
    for index in range(spec.n_cases):
        volume, case = generate_case(spec, index)
        fname = f"{case.subject_id}.mha"
        (out / fname).write_bytes(write_mha(volume))
        volumes.append((case.subject_id, fname))
        labels.append(case)
    (out / "labels.csv").write_bytes(write_labels(labels))
    manifest = DatasetManifest(
        volumes=volumes,
        labels_file="labels.csv",
        n_cases=spec.n_cases,
        n_severe=sum(c.severe for c in labels),
        n_positive=sum(c.covid_positive for c in labels),
    )
    manifest.save(out / "manifest.json")
    return manifest
