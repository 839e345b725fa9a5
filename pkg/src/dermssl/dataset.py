"""Image records, priority triage mapping, cleaning, splitting and synthetic data.

Records flow through the same steps whatever their origin::

    records = read_manifest("hospital.csv", pmap)
    records = dedupe_by_patient(quality_filter(filter_modality(records)), 1)
    train, val = split(merge_sources(records, isic_records), SplitSpec(0.8, seed=0))

Synthetic datasets are written in the manifest format too, so nothing
downstream knows where an image came from.
"""
from __future__ import annotations

import csv
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import DataError, SplitError, UnknownLabelError


class Priority(str, Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"

    @property
    def index(self) -> int:
        return int(self.value[1]) - 1

    @classmethod
    def from_index(cls, i: int) -> "Priority":
        return list(cls)[i]


class Source(str, Enum):
    HOSPITAL = "hospital"
    ISIC = "isic"
    SYNTHETIC = "synthetic"


class Modality(str, Enum):
    DERMATOSCOPIC = "dermatoscopic"
    CLINICAL = "clinical"


# Triage grouping of the hospital's lesion vocabulary.
HOSPITAL_PRIORITIES: dict[str, Priority] = {
    "Melanoma": Priority.P1,
    "Squamous Cell Carcinoma": Priority.P1,
    "Basal Cell Carcinoma": Priority.P1,
    "Superficial Basal Cell Carcinoma": Priority.P1,
    "Actinic Keratosis": Priority.P2,
    "Common Acquired Melanocytic Nevus": Priority.P2,
    "Atypical Melanocytic Nevus": Priority.P2,
    "Acral Melanocytic Nevus": Priority.P2,
    "Spitz Reed Nevus": Priority.P2,
    "Irritated Melanocytic Nevus": Priority.P2,
    "Acquired Angioma": Priority.P3,
    "Dermatofibroma": Priority.P3,
    "Other Skin Lesions": Priority.P3,
}

# label given to synthetic records of each priority; resolved through the
# hospital vocabulary
SYNTHETIC_LABELS = {
    Priority.P1: "Melanoma",
    Priority.P2: "Common Acquired Melanocytic Nevus",
    Priority.P3: "Dermatofibroma",
}


def _norm_label(label: str) -> str:
    return re.sub(r"\s+", " ", label.strip()).casefold()


@dataclass(eq=False)
class ImageRecord:
    """One labeled image.

    ``image`` is an ``(H, W, 3)`` float32 array in ``[0, 1]``; it may be
    ``None`` when only ``path`` is known and pixels have not been loaded.
    """

    image: np.ndarray | None
    source_id: Source
    original_label: str
    priority: Priority
    patient_id: str
    modality: Modality
    path: str | None = None

    def __post_init__(self):
        self.source_id = Source(self.source_id)
        self.priority = Priority(self.priority)
        self.modality = Modality(self.modality)
        if self.image is not None:
            img = np.asarray(self.image, dtype=np.float32)
            if img.ndim != 3 or img.shape[2] != 3:
                raise DataError(f"image must be (H, W, 3), got {img.shape}")
            if img.size and (img.min() < 0.0 or img.max() > 1.0):
                raise DataError("image values must lie in [0, 1]")
            self.image = img


class PriorityMap:
    """Maps ``(source, label)`` pairs to a priority class.

    ``fallback`` gives a per-source catch-all priority for labels outside the
    vocabulary; sources without a fallback raise :class:`UnknownLabelError`.
    """

    def __init__(
        self,
        entries: Mapping[tuple[str, str], Priority | str],
        fallback: Mapping[str, Priority | str] | None = None,
    ):
        self._entries: dict[tuple[Source, str], Priority] = {}
        self._display: dict[tuple[Source, str], str] = {}
        for (source, label), prio in entries.items():
            key = (Source(source), _norm_label(label))
            self._entries[key] = Priority(prio)
            self._display[key] = label
        self.fallback = {Source(s): Priority(p) for s, p in (fallback or {}).items()}

    @classmethod
    def default(cls) -> "PriorityMap":
        entries = {}
        for label, prio in HOSPITAL_PRIORITIES.items():
            entries[(Source.HOSPITAL, label)] = prio
            entries[(Source.SYNTHETIC, label)] = prio
        return cls(entries, fallback={Source.HOSPITAL: Priority.P3})

    @classmethod
    def from_file(cls, path: str | Path, base: "PriorityMap | None" = None) -> "PriorityMap":
        """Load a JSON mapping file and layer it over ``base`` (default table).

        The file looks like ``{"isic": {"MEL": "P1", ...}, "fallback": {...}}``;
        every top-level key other than ``fallback`` names a source.
        """
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read priority map {path}: {exc}") from exc
        return cls.from_dict(raw, base=base)

    @classmethod
    def from_dict(cls, raw: Mapping, base: "PriorityMap | None" = None) -> "PriorityMap":
        base = cls.default() if base is None else base
        entries = {(s, base._display[(s, k)]): p for (s, k), p in base._entries.items()}
        fallback = dict(base.fallback)
        try:
            for source, table in raw.items():
                if source == "fallback":
                    fallback.update({Source(s): Priority(p) for s, p in table.items()})
                    continue
                for label, prio in table.items():
                    entries[(Source(source), label)] = Priority(prio)
        except ValueError as exc:
            raise DataError(f"invalid priority map entry: {exc}") from exc
        return cls(entries, fallback)

    def lookup(self, label: str, source: Source | str) -> Priority:
        source = Source(source)
        prio = self._entries.get((source, _norm_label(label)))
        if prio is not None:
            return prio
        if source in self.fallback:
            return self.fallback[source]
        raise UnknownLabelError(label, source.value)

    def labels(self, source: Source | str) -> list[str]:
        source = Source(source)
        return [self._display[k] for k in self._entries if k[0] == source]

    def knows(self, label: str, source: Source | str) -> bool:
        return (Source(source), _norm_label(label)) in self._entries

    def to_dict(self) -> dict:
        out: dict[str, dict[str, str]] = defaultdict(dict)
        for key, prio in self._entries.items():
            out[key[0].value][self._display[key]] = prio.value
        out["fallback"] = {s.value: p.value for s, p in self.fallback.items()}
        return dict(out)


_DEFAULT_MAP = PriorityMap.default()


def map_to_priority(label: str, source: Source | str, pmap: PriorityMap | None = None) -> Priority:
    return (pmap or _DEFAULT_MAP).lookup(label, source)


def filter_modality(
    records: Iterable[ImageRecord], keep: Modality = Modality.DERMATOSCOPIC
) -> list[ImageRecord]:
    return [r for r in records if r.modality == keep]


def quality_filter(
    records: Iterable[ImageRecord], predicate: Callable[[ImageRecord], bool] | None = None
) -> list[ImageRecord]:
    """Drop records rejected by ``predicate``; with no predicate every record passes."""
    if predicate is None:
        return list(records)
    return [r for r in records if predicate(r)]


def dedupe_by_patient(records: Iterable[ImageRecord], max_per_patient: int = 1) -> list[ImageRecord]:
    if max_per_patient < 1:
        raise ValueError("max_per_patient must be >= 1")
    seen: Counter = Counter()
    out = []
    for r in records:
        if seen[r.patient_id] < max_per_patient:
            seen[r.patient_id] += 1
            out.append(r)
    return out


def merge_sources(a: Sequence[ImageRecord], b: Sequence[ImageRecord]) -> list[ImageRecord]:
    return list(a) + list(b)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratify_by: str = "priority"

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.stratify_by not in ("priority", "none"):
            raise ValueError(f"stratify_by must be 'priority' or 'none', got {self.stratify_by!r}")


def _n_train(n: int, frac: float) -> int:
    return int(np.floor(frac * n + 0.5))


def split(
    records: Sequence[ImageRecord], spec: SplitSpec
) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Deterministic train/val partition; both sides keep input order."""
    records = list(records)
    if not records:
        raise SplitError("cannot split an empty record set")
    rng = np.random.default_rng(spec.seed)
    if spec.stratify_by == "priority":
        groups: dict[Priority, list[int]] = defaultdict(list)
        for i, r in enumerate(records):
            groups[r.priority].append(i)
        train_idx: list[int] = []
        for prio in sorted(groups, key=lambda p: p.index):
            idx = np.asarray(groups[prio])
            perm = rng.permutation(len(idx))
            train_idx.extend(idx[perm[: _n_train(len(idx), spec.train_fraction)]].tolist())
    else:
        perm = rng.permutation(len(records))
        train_idx = perm[: _n_train(len(records), spec.train_fraction)].tolist()
    chosen = set(train_idx)
    train = [r for i, r in enumerate(records) if i in chosen]
    val = [r for i, r in enumerate(records) if i not in chosen]
    if not train or not val:
        raise SplitError(
            f"degenerate split of {len(records)} records: {len(train)} train, {len(val)} val"
        )
    return train, val


# lesion appearance per priority: radius as a fraction of the image side, RGB
_LESION_STYLE = {
    Priority.P1: (0.36, (0.22, 0.12, 0.10)),
    Priority.P2: (0.25, (0.55, 0.36, 0.22)),
    Priority.P3: (0.15, (0.80, 0.30, 0.32)),
}
_SKIN = np.array([0.88, 0.72, 0.62], dtype=np.float32)


def _render_lesion(rng: np.random.Generator, res: int, prio: Priority, clinical: bool) -> np.ndarray:
    radius_frac, color = _LESION_STYLE[prio]
    scale = 0.5 if clinical else 1.0
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32) + 0.5
    cy, cx = res / 2 + rng.uniform(-res / 10, res / 10, size=2)
    ry = radius_frac * scale * res * rng.uniform(0.85, 1.15)
    rx = radius_frac * scale * res * rng.uniform(0.85, 1.15)
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    mask = np.clip((1.15 - d) / 0.3, 0.0, 1.0)[..., None]
    skin = _SKIN + rng.normal(0.0, 0.03, size=3).astype(np.float32)
    lesion = np.asarray(color, dtype=np.float32) + rng.normal(0.0, 0.04, size=3).astype(np.float32)
    img = skin * (1 - mask) + lesion * mask
    img = img + rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(
    n: int,
    resolution: int = 64,
    class_count: int = 3,
    seed: int = 0,
    dermatoscopic_fraction: float = 1.0,
    n_patients: int | None = None,
) -> list[ImageRecord]:
    """Class-conditional lesion-like images standing in for real data.

    Priorities are assigned round-robin over the first ``class_count`` classes.
    Lesion size and color depend on the class, so the task is learnable.
    Exactly ``round(n * dermatoscopic_fraction)`` records are dermatoscopic.
    With ``n_patients`` set, patient ids are drawn from that many patients, so
    some patients own several images.
    """
    if not 1 <= class_count <= len(Priority):
        raise ValueError(f"class_count must be in [1, {len(Priority)}]")
    if n < class_count:
        raise ValueError(f"n must be >= class_count ({class_count}), got {n}")
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    if not 0.0 <= dermatoscopic_fraction <= 1.0:
        raise ValueError("dermatoscopic_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    n_derm = _n_train(n, dermatoscopic_fraction)
    derm = np.zeros(n, dtype=bool)
    derm[rng.permutation(n)[:n_derm]] = True
    if n_patients is None:
        patients = np.arange(n)
    else:
        patients = rng.integers(0, n_patients, size=n)
    records = []
    for i in range(n):
        prio = Priority.from_index(i % class_count)
        modality = Modality.DERMATOSCOPIC if derm[i] else Modality.CLINICAL
        img = _render_lesion(rng, resolution, prio, clinical=not derm[i])
        records.append(
            ImageRecord(
                image=img,
                source_id=Source.SYNTHETIC,
                original_label=SYNTHETIC_LABELS[prio],
                priority=prio,
                patient_id=f"synth-{patients[i]:06d}",
                modality=modality,
            )
        )
    return records


MANIFEST_FIELDS = ("image_path", "source_id", "original_label", "patient_id", "modality")


def load_image(path: str | Path, resolution: int | None = None) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path).astype(np.float32)
        if resolution is not None and img.shape[:2] != (resolution, resolution):
            pil = Image.fromarray(np.round(img * 255).astype(np.uint8))
            img = np.asarray(pil.resize((resolution, resolution), Image.BILINEAR), np.float32) / 255
        return img
    with Image.open(path) as pil:
        pil = pil.convert("RGB")
        if resolution is not None and pil.size != (resolution, resolution):
            pil = pil.resize((resolution, resolution), Image.BILINEAR)
        return np.asarray(pil, dtype=np.float32) / 255.0


def read_manifest(
    path: str | Path,
    pmap: PriorityMap | None = None,
    resolution: int | None = None,
    load_images: bool = True,
) -> list[ImageRecord]:
    """Read a CSV manifest; priorities are computed from labels, never read.

    Relative image paths resolve against the manifest's directory.
    """
    path = Path(path)
    pmap = pmap or _DEFAULT_MAP
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open manifest {path}: {exc}") from exc
    records = []
    with fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: manifest missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            img_path = Path(row["image_path"])
            if not img_path.is_absolute():
                img_path = path.parent / img_path
            try:
                source = Source(row["source_id"])
                modality = Modality(row["modality"])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            image = None
            if load_images:
                try:
                    image = load_image(img_path, resolution)
                except OSError as exc:
                    raise DataError(f"{path}:{lineno}: cannot load {img_path}: {exc}") from exc
            records.append(
                ImageRecord(
                    image=image,
                    source_id=source,
                    original_label=row["original_label"],
                    priority=pmap.lookup(row["original_label"], source),
                    patient_id=row["patient_id"],
                    modality=modality,
                    path=str(img_path),
                )
            )
    return records


def write_manifest(
    records: Sequence[ImageRecord], path: str | Path, image_dir: str | Path | None = None
) -> Path:
    """Write records (and their pixels, as PNG) in manifest form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_dir = Path(image_dir) if image_dir is not None else path.parent / (path.stem + "_images")
    image_dir.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(len(records))))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for i, r in enumerate(records):
            if r.image is None:
                raise DataError(f"record {i} has no pixels to write")
            img_path = image_dir / f"{i:0{width}d}.png"
            Image.fromarray(np.round(r.image * 255).astype(np.uint8)).save(img_path)
            try:
                rel = img_path.relative_to(path.parent)
            except ValueError:
                rel = img_path.resolve()
            writer.writerow([rel.as_posix(), r.source_id.value, r.original_label, r.patient_id, r.modality.value])
    return path


def class_counts(records: Iterable[ImageRecord]) -> list[int]:
    counts = Counter(r.priority.index for r in records)
    return [counts.get(i, 0) for i in range(len(Priority))]


def to_arrays(records: Sequence[ImageRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack records into ``(N, 3, H, W)`` images and ``(N,)`` class indices."""
    if any(r.image is None for r in records):
        raise DataError("records must have pixels loaded")
    x = np.stack([r.image.transpose(2, 0, 1) for r in records]).astype(np.float32)
    y = np.array([r.priority.index for r in records], dtype=np.int64)
    return x, y


def relabel(records: Iterable[ImageRecord], pmap: PriorityMap) -> list[ImageRecord]:
    return [replace(r, priority=pmap.lookup(r.original_label, r.source_id)) for r in records]
