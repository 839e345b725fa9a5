"""Per-epoch training logs and their on-disk formats.

An :class:`EpochLog` is written as JSON lines, one object per epoch with keys
``run_id, epoch, train_loss, val_loss, train_acc, val_acc`` plus, when known,
the ``config_hash`` of the producing run; or exported as CSV with a header row.
Both readers validate epoch continuity.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import LogFormatError

LOG_KEYS = ("run_id", "epoch", "train_loss", "val_loss", "train_acc", "val_acc")
METRICS = ("train_loss", "val_loss", "train_acc", "val_acc")


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


@dataclass
class EpochLog:
    run_id: str
    rows: list[EpochRow] = field(default_factory=list)
    config_hash: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for i, row in enumerate(self.rows):
            if row.epoch != i:
                raise LogFormatError(f"expected epoch {i}, found {row.epoch}")
            for acc in (row.train_acc, row.val_acc):
                if not 0.0 <= acc <= 1.0:
                    raise LogFormatError(f"epoch {row.epoch}: accuracy {acc} outside [0, 1]")

    def append(self, row: EpochRow) -> None:
        if row.epoch != len(self.rows):
            raise LogFormatError(f"expected epoch {len(self.rows)}, got {row.epoch}")
        self.rows.append(row)
        self.validate()

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def epochs(self) -> list[int]:
        return [r.epoch for r in self.rows]

    def series(self, metric: str) -> list[tuple[int, float]]:
        if metric not in METRICS:
            raise KeyError(metric)
        return [(r.epoch, getattr(r, metric)) for r in self.rows]

    def to_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for row in self.rows:
                fh.write(json.dumps(_stamp({"run_id": self.run_id, **asdict(row)}, self.config_hash)) + "\n")
        return path

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_KEYS)
            for row in self.rows:
                writer.writerow([self.run_id, *(getattr(row, k) for k in LOG_KEYS[1:])])
        return path

    @classmethod
    def from_rows(cls, run_id: str, rows: list[dict]) -> "EpochLog":
        return cls(run_id, [EpochRow(**{k: r[k] for k in LOG_KEYS[1:]}) for r in rows])


def _stamp(obj: dict, config_hash: str | None) -> dict:
    if config_hash is not None:
        obj["config_hash"] = config_hash
    return obj


def _coerce(obj: dict, lineno: int) -> tuple[str, EpochRow]:
    missing = [k for k in LOG_KEYS if k not in obj]
    if missing:
        raise LogFormatError(f"missing keys {missing}", lineno)
    try:
        epoch = int(obj["epoch"])
        values = [float(obj[k]) for k in METRICS]
    except (TypeError, ValueError) as exc:
        raise LogFormatError(f"bad value: {exc}", lineno) from exc
    if not all(math.isfinite(v) for v in values):
        raise LogFormatError("non-finite metric", lineno)
    return str(obj["run_id"]), EpochRow(epoch, *values)


def _assemble(entries: list[tuple[int, str, EpochRow]], path: Path, config_hash: str | None = None) -> EpochLog:
    if not entries:
        raise LogFormatError(f"{path}: empty log")
    run_ids = {rid for _, rid, _ in entries}
    if len(run_ids) > 1:
        raise LogFormatError(f"{path}: mixed run ids {sorted(run_ids)}")
    log = EpochLog(entries[0][1], config_hash=config_hash)
    for lineno, _, row in entries:
        try:
            log.append(row)
        except LogFormatError as exc:
            raise LogFormatError(str(exc), lineno) from None
    return log


def read_epoch_log(path: str | Path) -> EpochLog:
    """Read a ``.jsonl`` or ``.csv`` epoch log, naming the offending line on error."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LogFormatError(f"cannot read {path}: {exc}") from exc
    entries = []
    hashes = set()
    if path.suffix == ".csv":
        reader = csv.DictReader(text.splitlines())
        if tuple(reader.fieldnames or ()) != LOG_KEYS:
            raise LogFormatError(f"header must be {','.join(LOG_KEYS)}", 1)
        for lineno, row in enumerate(reader, start=2):
            entries.append((lineno, *_coerce(row, lineno)))
    else:
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogFormatError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(obj, dict):
                raise LogFormatError("expected a JSON object", lineno)
            entries.append((lineno, *_coerce(obj, lineno)))
            if obj.get("config_hash") is not None:
                hashes.add(obj["config_hash"])
    if len(hashes) > 1:
        raise LogFormatError(f"{path}: mixed config hashes")
    return _assemble(entries, path, hashes.pop() if hashes else None)


@dataclass(frozen=True)
class ElboRow:
    epoch: int
    beta: float
    train_recon: float
    train_kl: float
    train_total: float
    val_recon: float
    val_kl: float
    val_total: float


@dataclass
class PretrainLog:
    """Per-epoch ELBO terms of a pretraining run."""

    run_id: str
    rows: list[ElboRow] = field(default_factory=list)
    config_hash: str | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def to_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for row in self.rows:
                fh.write(json.dumps(_stamp({"run_id": self.run_id, **asdict(row)}, self.config_hash)) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "PretrainLog":
        names = [f.name for f in fields(ElboRow)]
        rows, run_id, config_hash = [], "", None
        for line in Path(path).read_text().splitlines():
            if line.strip():
                obj = json.loads(line)
                run_id = obj["run_id"]
                config_hash = obj.get("config_hash", config_hash)
                rows.append(ElboRow(**{k: obj[k] for k in names}))
        return cls(run_id, rows, config_hash)
