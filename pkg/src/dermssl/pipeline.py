"""Stage (I) VAE pretraining and stage (II) frozen-backbone classification.

``pretrain`` fits a VAE with a linearly warmed-up KL weight. ``train_classifier``
trains a fresh head on a frozen backbone, unfreezes the backbone's final stage
at ``epochs_frozen``, and keeps going to ``epochs_total``. ``compare`` runs two
backbone sources through identical stage-(II) settings after checking parity.
"""
from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Sequence

import torch

from . import dataset as ds
from .backbones import Backbone, checksum, count_parameters, stage_checksums
from .checkpoint import (
    backbone_manifest,
    check_compatible,
    head_manifest,
    load_backbone,
    save_checkpoint,
    vae_manifest,
)
from .config import ExperimentConfig
from .errors import ConfigError, ParityError, TrainingAbort
from .external import external_backbone
from .head import ClassifierHead, FocalParams, HeadAudit, HeadSpec, focal_loss, freeze, unfreeze_final_stage
from .logs import ElboRow, EpochLog, EpochRow, PretrainLog
from .optim import AdamWScheduleFree
from .vae import VAE, beta_schedule, elbo_loss, reparameterize

log = logging.getLogger(__name__)


def prepare_data(config: ExperimentConfig) -> tuple[list[ds.ImageRecord], list[ds.ImageRecord]]:
    """Read, merge, clean and split the manifests named in ``config.data``."""
    dc = config.data
    if not dc.manifests:
        raise ConfigError("config.data.manifests is empty")
    pmap = ds.PriorityMap.from_file(dc.priority_map) if dc.priority_map else ds.PriorityMap.default()
    records: list[ds.ImageRecord] = []
    for manifest in dc.manifests:
        records = ds.merge_sources(records, ds.read_manifest(manifest, pmap, config.backbone.image_size))
    if dc.dermatoscopic_only:
        records = ds.filter_modality(records)
    records = ds.quality_filter(records)
    if dc.max_per_patient is not None:
        records = ds.dedupe_by_patient(records, dc.max_per_patient)
    return ds.split(records, dc.split_spec)


def _tensors(records: Sequence[ds.ImageRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    x, y = ds.to_arrays(records)
    return torch.from_numpy(x), torch.from_numpy(y)


def _check_finite(epoch: int, **terms: float) -> None:
    for name, value in terms.items():
        if not math.isfinite(value):
            raise TrainingAbort(epoch, name, value)


@dataclass
class PretrainResult:
    model: VAE
    log: PretrainLog
    checkpoint: Path | None = None


def pretrain(
    config: ExperimentConfig,
    train: Sequence[ds.ImageRecord],
    val: Sequence[ds.ImageRecord],
    out_dir: str | Path | None = None,
    run_id: str | None = None,
) -> PretrainResult:
    """Fit a randomly initialized VAE; logs train and val ELBO terms per epoch.

    Optimizer is AdamW at ``stage1.learning_rate`` with no decay schedule.
    Validation uses the posterior mean (no sampling noise).
    """
    if config.backbone.init != "random":
        raise ConfigError("stage (I) pretraining requires backbone.init='random'")
    s1 = config.stage1
    run_id = run_id or f"{config.name}-pretrain"
    torch.manual_seed(s1.seed)
    model = VAE(config.backbone, s1.latent_dim)
    opt = torch.optim.AdamW(model.parameters(), lr=s1.learning_rate, weight_decay=s1.weight_decay)
    gen = torch.Generator().manual_seed(s1.seed)
    x_train, _ = _tensors(train)
    x_val, _ = _tensors(val)
    n = len(x_train)
    plog = PretrainLog(run_id, config_hash=config.config_hash)

    for epoch in range(s1.epochs):
        beta = beta_schedule(epoch, s1.warmup_epochs, s1.beta_ceiling)
        model.train()
        recon_sum = kl_sum = 0.0
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, s1.batch_size):
            x = x_train[perm[i : i + s1.batch_size]]
            stats = model.encode(x)
            noise = torch.randn(stats.mu.shape, generator=gen)
            x_hat = model.decode(reparameterize(stats, noise))
            terms = elbo_loss(x, x_hat, stats, beta)
            _check_finite(epoch, recon=float(terms.recon.detach()), kl=float(terms.kl.detach()))
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            recon_sum += float(terms.recon.detach()) * len(x)
            kl_sum += float(terms.kl.detach()) * len(x)
        train_recon, train_kl = recon_sum / n, kl_sum / n

        model.eval()
        with torch.no_grad():
            stats = model.encode(x_val)
            terms = elbo_loss(x_val, model.decode(stats.mu), stats, beta)
        val_recon, val_kl = float(terms.recon), float(terms.kl)
        _check_finite(epoch, val_recon=val_recon, val_kl=val_kl)
        plog.rows.append(
            ElboRow(
                epoch,
                beta,
                train_recon,
                train_kl,
                train_recon + beta * train_kl,
                val_recon,
                val_kl,
                val_recon + beta * val_kl,
            )
        )
        log.debug("pretrain epoch %d beta=%.3f recon=%.5f kl=%.5f", epoch, beta, train_recon, train_kl)

    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        ckpt = save_checkpoint(
            model,
            out / f"{run_id}-vae",
            vae_manifest(
                model,
                epoch=s1.epochs - 1,
                seed=s1.seed,
                config_hash=config.config_hash,
                optimizer={"name": "adamw", "lr": s1.learning_rate, "weight_decay": s1.weight_decay},
                warmup_epochs=s1.warmup_epochs,
                beta_ceiling=s1.beta_ceiling,
            ),
        )
        plog.to_jsonl(out / f"{run_id}-elbo.jsonl")
    return PretrainResult(model, plog, ckpt)


def resolve_backbone(config: ExperimentConfig) -> Backbone:
    """Backbone named by ``config.source``."""
    src = config.source
    if src.checkpoint is not None:
        backbone, _ = load_backbone(src.checkpoint, expected=config.backbone)
        return backbone
    if src.kind == "vae":
        raise ConfigError("a vae source needs a checkpoint path")
    provider = src.provider or "standin"
    backbone = external_backbone(config.backbone, provider, seed=config.stage2.seed)
    check_compatible(config.backbone, backbone.spec)
    return backbone


@dataclass
class ClassifierRun:
    log: EpochLog
    head: ClassifierHead
    backbone: Backbone
    focal: FocalParams
    # stage checksums before training (index 0) and after each epoch (index e + 1)
    checksums: list[dict[str, str]] = field(default_factory=list)
    trainable_params: dict[int, int] = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    checkpoint: Path | None = None

    def checksum_after(self, epoch: int) -> dict[str, str]:
        return self.checksums[epoch + 1]


def build_head(config: ExperimentConfig, feature_dim: int) -> ClassifierHead:
    s2 = config.stage2
    return ClassifierHead(HeadSpec(feature_dim, s2.hidden_dim, len(ds.Priority), s2.dropout_rate))


def train_classifier(
    config: ExperimentConfig,
    train: Sequence[ds.ImageRecord],
    val: Sequence[ds.ImageRecord],
    backbone: Backbone | None = None,
    out_dir: str | Path | None = None,
    run_id: str | None = None,
) -> ClassifierRun:
    """Train a fresh head over a frozen backbone, unfreezing its final stage
    at ``stage2.epochs_frozen``.

    ``backbone`` defaults to :func:`resolve_backbone`; a passed backbone is
    copied, never mutated. The schedule-free optimizer's averaged iterate is
    used for every validation pass.
    """
    s2 = config.stage2
    run_id = run_id or f"{config.name}-{config.source.kind}"
    backbone = copy.deepcopy(backbone) if backbone is not None else resolve_backbone(config)
    if backbone.spec.feature_dim != config.backbone.feature_dim:
        raise ConfigError("backbone feature width differs from config.backbone")
    freeze(backbone)

    torch.manual_seed(s2.seed)
    head = build_head(config, backbone.feature_dim)
    x_train, y_train = _tensors(train)
    x_val, y_val = _tensors(val)
    if s2.focal_alpha is not None:
        focal = FocalParams(s2.focal_gamma, s2.focal_alpha)
    else:
        focal = FocalParams.inverse_frequency(ds.class_counts(train), s2.focal_gamma)
    opt = AdamWScheduleFree(
        head.parameters(),
        lr=s2.learning_rate,
        betas=s2.betas,
        weight_decay=s2.weight_decay,
        warmup_steps=s2.warmup_steps,
    )
    gen = torch.Generator().manual_seed(s2.seed)
    n = len(x_train)

    run = ClassifierRun(EpochLog(run_id, config_hash=config.config_hash), head, backbone, focal, optimizer=opt.hyperparameters())
    run.checksums.append(stage_checksums(backbone))

    with torch.no_grad():
        frozen_train = backbone.forward_features(x_train)
        frozen_val = backbone.forward_features(x_val)

    for epoch in range(s2.epochs_total):
        if epoch == s2.epochs_frozen:
            opt.add_param_group({"params": unfreeze_final_stage(backbone)})
        fine_tuning = epoch >= s2.epochs_frozen
        run.trainable_params[epoch] = count_parameters(head, True) + count_parameters(backbone, True)

        opt.train()
        head.train()
        loss_sum = 0.0
        correct = 0
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, s2.batch_size):
            idx = perm[i : i + s2.batch_size]
            feats = backbone.forward_features(x_train[idx]) if fine_tuning else frozen_train[idx]
            logits = head(feats)
            loss = focal_loss(logits, y_train[idx], focal.gamma, focal.alpha)
            _check_finite(epoch, focal_loss=float(loss.detach()))
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == y_train[idx]).sum())

        opt.eval()
        head.eval()
        with torch.no_grad():
            feats = backbone.forward_features(x_val) if fine_tuning else frozen_val
            logits = head(feats)
            val_loss = float(focal_loss(logits, y_val, focal.gamma, focal.alpha))
            val_acc = float((logits.argmax(1) == y_val).float().mean())
        _check_finite(epoch, val_focal_loss=val_loss)
        run.log.append(EpochRow(epoch, loss_sum / n, val_loss, correct / n, val_acc))
        run.checksums.append(stage_checksums(backbone))

    if out_dir is not None:
        out = Path(out_dir)
        extra = dict(
            epoch=s2.epochs_total - 1,
            seed=s2.seed,
            config_hash=config.config_hash,
            stage2_hash=config.stage2_hash,
            focal={"gamma": focal.gamma, "alpha": list(focal.alpha) if focal.alpha else None},
            optimizer={**opt.hyperparameters(), "schedule_free": True, "fallback": False},
        )
        run.checkpoint = save_checkpoint(
            head, out / f"{run_id}-head", head_manifest(head, backbone=backbone.spec.to_dict(), **extra)
        )
        save_checkpoint(backbone, out / f"{run_id}-backbone", backbone_manifest(backbone, **extra))
        run.log.to_jsonl(out / f"{run_id}.jsonl")
    return run


@dataclass
class ParityReport:
    head_params: tuple[int, int]
    head_shapes: tuple[list, list]
    stage2_hashes: tuple[str, str]
    data_hashes: tuple[str, str]
    feature_dims: tuple[int, int]

    @property
    def ok(self) -> bool:
        return (
            self.head_params[0] == self.head_params[1]
            and self.head_shapes[0] == self.head_shapes[1]
            and self.stage2_hashes[0] == self.stage2_hashes[1]
            and self.data_hashes[0] == self.data_hashes[1]
        )

    def problems(self) -> list[str]:
        out = []
        if self.stage2_hashes[0] != self.stage2_hashes[1]:
            out.append("stage-2 settings differ")
        if self.data_hashes[0] != self.data_hashes[1]:
            out.append("data settings differ")
        if self.head_params[0] != self.head_params[1] or self.head_shapes[0] != self.head_shapes[1]:
            out.append(f"head parameter counts differ ({self.head_params[0]} vs {self.head_params[1]})")
        return out

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "head_params": list(self.head_params),
            "stage2_hashes": list(self.stage2_hashes),
            "data_hashes": list(self.data_hashes),
            "feature_dims": list(self.feature_dims),
        }


def parity_report(config_a: ExperimentConfig, config_b: ExperimentConfig, feature_dims=None) -> ParityReport:
    dims = feature_dims or (config_a.backbone.feature_dim, config_b.backbone.feature_dim)
    audits = [HeadAudit.of(build_head(c, d)) for c, d in zip((config_a, config_b), dims)]
    return ParityReport(
        (audits[0].head_params, audits[1].head_params),
        (audits[0].layer_shapes, audits[1].layer_shapes),
        (config_a.stage2_hash, config_b.stage2_hash),
        (config_a.data_hash, config_b.data_hash),
        tuple(dims),
    )


def check_parity(config_a: ExperimentConfig, config_b: ExperimentConfig, feature_dims=None) -> ParityReport:
    report = parity_report(config_a, config_b, feature_dims)
    if not report.ok:
        raise ParityError("parity violation: " + "; ".join(report.problems()))
    return report


@dataclass
class CompareResult:
    a: ClassifierRun
    b: ClassifierRun
    parity: ParityReport


def _run_arm(args) -> ClassifierRun:
    config, train, val, backbone, out_dir, run_id = args
    return train_classifier(config, train, val, backbone=backbone, out_dir=out_dir, run_id=run_id)


def compare(
    config_a: ExperimentConfig,
    config_b: ExperimentConfig,
    train: Sequence[ds.ImageRecord],
    val: Sequence[ds.ImageRecord],
    backbone_a: Backbone | None = None,
    backbone_b: Backbone | None = None,
    out_dir: str | Path | None = None,
    parallel: bool = False,
) -> CompareResult:
    """Run both arms on the same split with identical stage-(II) settings.

    Parity is checked on configs before any backbone is built and again on the
    resolved feature widths; any violation raises :class:`ParityError`.
    """
    check_parity(config_a, config_b)
    backbone_a = backbone_a if backbone_a is not None else resolve_backbone(config_a)
    backbone_b = backbone_b if backbone_b is not None else resolve_backbone(config_b)
    report = check_parity(config_a, config_b, (backbone_a.feature_dim, backbone_b.feature_dim))
    jobs = [
        (config_a, train, val, backbone_a, out_dir, f"{config_a.name}-A"),
        (config_b, train, val, backbone_b, out_dir, f"{config_b.name}-B"),
    ]
    if parallel:
        with ProcessPoolExecutor(max_workers=2, mp_context=get_context("spawn")) as pool:
            run_a, run_b = pool.map(_run_arm, jobs)
    else:
        run_a, run_b = map(_run_arm, jobs)
    if run_a.log.epochs != run_b.log.epochs:
        raise ParityError("arms produced different epoch ranges")
    return CompareResult(run_a, run_b, report)


def backbone_checksum(backbone: Backbone) -> str:
    return checksum(backbone)
