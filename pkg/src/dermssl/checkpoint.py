"""Weights blob + JSON manifest checkpoints.

``save_checkpoint(model, "runs/vae", manifest)`` writes ``runs/vae.pt`` (a
torch state dict) next to ``runs/vae.json``. The manifest is the portable part:
it records enough to rebuild the module before the blob is loaded.
"""
from __future__ import annotations

import json
from pathlib import Path

import torch
from torch import nn

from .backbones import Backbone, BackboneSpec, build_encoder
from .errors import CheckpointMismatchError, ConfigError
from .head import ClassifierHead, HeadSpec
from .vae import VAE


def _paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".pt", ".json") else path
    return stem.with_suffix(".pt"), stem.with_suffix(".json")


def save_checkpoint(module: nn.Module, path: str | Path, manifest: dict) -> Path:
    """Write blob and manifest; returns the manifest path."""
    blob, meta = _paths(path)
    blob.parent.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), blob)
    meta.write_text(json.dumps({**manifest, "blob": blob.name}, indent=2, sort_keys=True) + "\n")
    return meta


def read_manifest(path: str | Path) -> dict:
    _, meta = _paths(path)
    try:
        return json.loads(meta.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint manifest {meta}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{meta}: invalid manifest: {exc}") from exc


def _load_state(path: str | Path, manifest: dict) -> dict:
    _, meta = _paths(path)
    blob = meta.parent / manifest.get("blob", meta.with_suffix(".pt").name)
    try:
        return torch.load(blob, map_location="cpu", weights_only=True)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint blob {blob}: {exc}") from exc


def backbone_spec_from_manifest(manifest: dict) -> BackboneSpec:
    return BackboneSpec(**manifest["backbone"])


def check_compatible(expected: BackboneSpec, found: BackboneSpec) -> None:
    """Architecture must agree; ``init`` is provenance and may differ."""
    keys = ("family", "stage_widths", "depths", "image_size")
    diffs = {k: (getattr(expected, k), getattr(found, k)) for k in keys if getattr(expected, k) != getattr(found, k)}
    if diffs:
        detail = ", ".join(f"{k}: expected {e}, checkpoint has {f}" for k, (e, f) in diffs.items())
        raise CheckpointMismatchError(f"checkpoint backbone mismatch ({detail})")


def vae_manifest(model: VAE, **extra) -> dict:
    return {
        "kind": "vae",
        "backbone": model.spec.to_dict(),
        "latent_dim": model.latent_dim,
        "feature_dim": model.spec.feature_dim,
        **extra,
    }


def load_vae(path: str | Path) -> tuple[VAE, dict]:
    manifest = read_manifest(path)
    if manifest.get("kind") != "vae":
        raise CheckpointMismatchError(f"expected a vae checkpoint, found {manifest.get('kind')!r}")
    model = VAE(backbone_spec_from_manifest(manifest), manifest["latent_dim"])
    model.load_state_dict(_load_state(path, manifest))
    return model, manifest


def backbone_manifest(backbone: Backbone, **extra) -> dict:
    return {"kind": "backbone", "backbone": backbone.spec.to_dict(), "feature_dim": backbone.feature_dim, **extra}


def load_backbone(path: str | Path, expected: BackboneSpec | None = None) -> tuple[Backbone, dict]:
    """Encoder from either a backbone or a VAE checkpoint."""
    manifest = read_manifest(path)
    kind = manifest.get("kind")
    if kind not in ("vae", "backbone"):
        raise CheckpointMismatchError(f"checkpoint kind {kind!r} holds no backbone")
    spec = backbone_spec_from_manifest(manifest)
    if expected is not None:
        check_compatible(expected, spec)
    state = _load_state(path, manifest)
    if kind == "vae":
        state = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
    encoder = build_encoder(spec)
    encoder.load_state_dict(state)
    return encoder, manifest


def head_manifest(head: ClassifierHead, **extra) -> dict:
    s = head.spec
    return {
        "kind": "classifier",
        "head": {"in_dim": s.in_dim, "hidden_dim": s.hidden_dim, "out_dim": s.out_dim, "dropout_rate": s.dropout_rate},
        **extra,
    }


def load_head(path: str | Path) -> tuple[ClassifierHead, dict]:
    manifest = read_manifest(path)
    if manifest.get("kind") != "classifier":
        raise CheckpointMismatchError(f"expected a classifier checkpoint, found {manifest.get('kind')!r}")
    head = ClassifierHead(HeadSpec(**manifest["head"]))
    head.load_state_dict(_load_state(path, manifest))
    return head, manifest
