"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 config, 4 data, 5 training abort, 6 parity.
Artifacts go to ``--out`` or, by default, a fresh directory under
``$DERMSSL_ARTIFACT_ROOT`` (``./runs`` when unset).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import uuid
from datetime import datetime, timezone
from pathlib import Path

from . import dataset as ds
from . import dynamics, pipeline, plotting
from .config import load_config
from .errors import DermSSLError, UsageError
from .logs import read_epoch_log

log = logging.getLogger("dermssl")

ARTIFACT_ROOT_ENV = "DERMSSL_ARTIFACT_ROOT"


class RunRecorder:
    """Collects artifact paths and writes ``run_manifest.json`` on success."""

    def __init__(self, command: str, out_dir: Path, config_hash: str | None = None):
        self.run_id = f"{command}-{uuid.uuid4().hex[:8]}"
        self.command = command
        self.out_dir = out_dir
        self.config_hash = config_hash
        self.started = _now()
        self.artifacts: dict[str, str] = {}

    def add(self, name: str, path) -> None:
        self.artifacts[name] = str(path)

    def finish(self) -> Path:
        missing = [p for p in self.artifacts.values() if not Path(p).exists()]
        if missing:
            raise DermSSLError(f"artifacts missing at exit: {missing}")
        path = self.out_dir / "run_manifest.json"
        path.write_text(
            json.dumps(
                {
                    "run_id": self.run_id,
                    "config_hash": self.config_hash,
                    "command": self.command,
                    "started": self.started,
                    "finished": _now(),
                    "artifacts": self.artifacts,
                },
                indent=2,
            )
            + "\n"
        )
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(arg: str | None, command: str) -> Path:
    if arg:
        out = Path(arg)
    else:
        root = Path(os.environ.get(ARTIFACT_ROOT_ENV, "runs"))
        out = root / f"{command}-{datetime.now().strftime('%Y%m%d-%H%M%S')}-{uuid.uuid4().hex[:4]}"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _config(path: str):
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def _window(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must look like 0-29, got {text!r}") from None
    if lo >= hi:
        raise argparse.ArgumentTypeError(f"window start must precede its end: {text!r}")
    return lo, hi


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_synth(args) -> dict:
    if args.n < 1 or args.classes < 1 or args.n < args.classes:
        raise UsageError("--n must be >= --classes >= 1")
    if args.resolution < 8:
        raise UsageError("--resolution must be >= 8")
    if not 0.0 <= args.dermatoscopic_fraction <= 1.0:
        raise UsageError("--dermatoscopic-fraction must be in [0, 1]")
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from exc
    records = ds.synth_dataset(
        args.n, args.resolution, args.classes, args.seed, args.dermatoscopic_fraction, args.patients
    )
    try:
        ds.write_manifest(records, out)
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from exc
    counts = ds.class_counts(records)
    print(f"wrote {len(records)} records to {out}")
    print("  " + "  ".join(f"{p.value}={c}" for p, c in zip(ds.Priority, counts)))
    return {"manifest": out, "counts": counts}


def cmd_pretrain(args) -> dict:
    config = _config(args.config)
    out = _out_dir(args.out, "pretrain")
    rec = RunRecorder("pretrain", out, config.config_hash)
    train, val = pipeline.prepare_data(config)
    result = pipeline.pretrain(config, train, val, out_dir=out, run_id=config.name)
    rec.add("checkpoint", result.checkpoint)
    rec.add("checkpoint_blob", result.checkpoint.with_suffix(".pt"))
    log_path = out / f"{config.name}-elbo.jsonl"
    rec.add("elbo_log", log_path)
    rec.add("plot", plotting.plot_pretrain(result.log, out / "pretrain.png"))
    config.save(out / "config.json")
    rec.add("config", out / "config.json")
    manifest = rec.finish()
    last = result.log.rows[-1]
    print(
        f"pretrain done: epochs={len(result.log)} recon={last.train_recon:.4f} "
        f"kl={last.train_kl:.4f} total={last.train_total:.4f} beta={last.beta:.4f}"
    )
    print(f"checkpoint: {result.checkpoint}")
    return {"out": out, "manifest": manifest, "result": result}


def cmd_classify(args) -> dict:
    config = _config(args.config)
    out = _out_dir(args.out, "classify")
    rec = RunRecorder("classify", out, config.config_hash)
    train, val = pipeline.prepare_data(config)
    run = pipeline.train_classifier(config, train, val, out_dir=out, run_id=config.name)
    rec.add("log", out / f"{config.name}.jsonl")
    rec.add("head", run.checkpoint)
    manifest = rec.finish()
    last = run.log.rows[-1]
    print(
        f"classify done: epochs={len(run.log)} train_loss={last.train_loss:.4f} "
        f"val_loss={last.val_loss:.4f} train_acc={last.train_acc:.4f} val_acc={last.val_acc:.4f}"
    )
    return {"out": out, "manifest": manifest, "run": run}


def _windows_for(config) -> tuple[tuple[int, int], tuple[int, int], int]:
    s2 = config.stage2
    return (0, s2.epochs_frozen - 1), (s2.epochs_frozen, s2.epochs_total - 1), s2.epochs_total - 1


def _write_reports(reports, out: Path, early, late, rec: RunRecorder) -> str:
    table = dynamics.render_table(reports, early, late)
    (out / "report.csv").write_text(dynamics.reports_to_csv(reports))
    (out / "report.txt").write_text(table)
    rec.add("report_csv", out / "report.csv")
    rec.add("report_txt", out / "report.txt")
    return table


def cmd_compare(args) -> dict:
    config_a = _config(args.config_a)
    config_b = _config(args.config_b)
    out = _out_dir(args.out, "compare")
    rec = RunRecorder("compare", out, config_a.config_hash)
    pipeline.check_parity(config_a, config_b)
    train, val = pipeline.prepare_data(config_a)
    result = pipeline.compare(config_a, config_b, train, val, out_dir=out, parallel=args.parallel)
    log_a = result.a.log.to_jsonl(out / f"{config_a.name}-A.jsonl")
    log_b = result.b.log.to_jsonl(out / f"{config_b.name}-B.jsonl")
    rec.add("log_a", log_a)
    rec.add("log_b", log_b)
    (out / "parity.json").write_text(json.dumps(result.parity.to_dict(), indent=2) + "\n")
    rec.add("parity", out / "parity.json")
    early, late, gap = _windows_for(config_a)
    reports = dynamics.table_report(result.a.log, result.b.log, early, late, gap)
    table = _write_reports(reports, out, early, late, rec)
    plot = plotting.plot_comparison(
        result.a.log, result.b.log, out / "dynamics.png", unfreeze_epoch=config_a.stage2.epochs_frozen
    )
    rec.add("plot", plot)
    manifest = rec.finish()
    print(f"parity ok: head params {result.parity.head_params[0]} == {result.parity.head_params[1]}")
    print(table, end="")
    return {"out": out, "manifest": manifest, "result": result, "reports": reports}


def cmd_analyze(args) -> dict:
    if len(args.logs) not in (1, 2):
        raise UsageError("analyze takes one or two log files")
    out = _out_dir(args.out, "analyze")
    rec = RunRecorder("analyze", out)
    logs = [read_epoch_log(p) for p in args.logs]
    if len(logs) == 2:
        reports = dynamics.table_report(logs[0], logs[1], args.early, args.late, args.gap_epoch)
    else:
        reports = dynamics.model_report(logs[0], "A", args.early, args.late, args.gap_epoch)
    table = _write_reports(reports, out, args.early, args.late, rec)
    if args.plot and len(logs) == 2:
        rec.add("plot", plotting.plot_comparison(logs[0], logs[1], out / "dynamics.png"))
    manifest = rec.finish()
    print(table, end="")
    return {"out": out, "manifest": manifest, "reports": reports}


def cmd_plot(args) -> dict:
    log_a, log_b = read_epoch_log(args.log_a), read_epoch_log(args.log_b)
    out = Path(args.out)
    path = plotting.plot_comparison(log_a, log_b, out, unfreeze_epoch=args.unfreeze_epoch)
    print(f"wrote {path}")
    return {"plot": path}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dermssl",
        description="VAE pretraining vs external pretraining for lesion triage, with dynamics analysis.",
        epilog=f"Artifacts default to ${ARTIFACT_ROOT_ENV} (./runs). "
        "Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 training abort, 6 parity.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic lesion dataset manifest")
    p.add_argument("--n", type=int, required=True, help="number of records")
    p.add_argument("--resolution", type=int, default=64, help="square image side in pixels")
    p.add_argument("--classes", type=int, default=3, help="number of priority classes (1-3)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dermatoscopic-fraction", type=float, default=1.0)
    p.add_argument("--patients", type=int, default=None, help="draw patient ids from this many patients")
    p.add_argument("--out", default="synthetic/manifest.csv", help="manifest path (images go beside it)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="stage (I): VAE pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("classify", help="stage (II) for a single backbone source")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("compare", help="stage (II) for two sources with parity checks, report and plots")
    p.add_argument("--config-a", required=True, help="config whose source is the VAE checkpoint")
    p.add_argument("--config-b", required=True, help="config whose source is the external backbone")
    p.add_argument("--out")
    p.add_argument("--parallel", action="store_true", help="run both arms in separate processes")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze", help="dynamics report for one or two epoch logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--early", type=_window, default=dynamics.EARLY_WINDOW, help="early slope window (default 0-29)")
    p.add_argument("--late", type=_window, default=dynamics.LATE_WINDOW, help="late slope window (default 30-70)")
    p.add_argument("--gap-epoch", type=int, default=dynamics.GAP_EPOCH, help="epoch for the overfitting gap")
    p.add_argument("--plot", action="store_true", help="also write the 2x2 curve figure")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plot", help="2x2 loss/accuracy figure for two epoch logs")
    p.add_argument("log_a")
    p.add_argument("log_b")
    p.add_argument("--out", default="dynamics.png")
    p.add_argument("--unfreeze-epoch", type=int, default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def run(argv=None) -> dict:
    """Parse and dispatch, letting exceptions propagate (for in-process use)."""
    args = build_parser().parse_args(argv)
    return args.func(args)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except DermSSLError as exc:
        print(f"dermssl {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
