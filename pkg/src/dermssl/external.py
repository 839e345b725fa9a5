"""Externally pretrained backbones.

Real runs bind torchvision's ImageNet ConvNeXt-Tiny. Where those weights are
unavailable, or for toy backbones, :func:`standin_backbone` produces a
backbone pretrained with supervision on a different visual domain (flat
colored shapes and stripes), which plays the same role in a comparison:
generic features that were never fitted to lesion images.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbones import Backbone, BackboneSpec, build_encoder, load_torchvision_convnext_tiny

SHAPES = ("disk", "square", "ring", "stripes")


def shape_images(n: int, resolution: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Randomly placed, sized and colored shapes on a flat background, labeled by shape."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float32) / resolution
    labels = rng.integers(0, len(SHAPES), size=n)
    images = np.empty((n, 3, resolution, resolution), dtype=np.float32)
    for i, c in enumerate(labels):
        cx, cy = rng.uniform(0.25, 0.75, size=2)
        size = rng.uniform(0.1, 0.4)
        dx, dy = xx - cx, yy - cy
        r = np.sqrt(dx**2 + dy**2)
        if SHAPES[c] == "disk":
            mask = r < size
        elif SHAPES[c] == "square":
            mask = (np.abs(dx) < 0.8 * size) & (np.abs(dy) < 0.8 * size)
        elif SHAPES[c] == "ring":
            mask = (r < size) & (r > 0.55 * size)
        else:
            theta, freq = rng.uniform(0, np.pi), rng.uniform(2, 5)
            mask = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))) > 0
        fg, bg = rng.uniform(0, 1, size=(2, 3)).astype(np.float32)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        images[i] = np.clip(img + rng.normal(0, 0.03, img.shape), 0, 1)
    return images, labels.astype(np.int64)


def standin_backbone(
    spec: BackboneSpec,
    seed: int = 0,
    n: int = 1024,
    epochs: int = 10,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> Backbone:
    """Supervised pretraining of ``spec`` on :func:`shape_images`."""
    torch.manual_seed(seed)
    spec = replace(spec, init="external_pretrained")
    encoder = build_encoder(spec)
    probe = nn.Linear(spec.feature_dim, len(SHAPES))
    x, y = shape_images(n, spec.image_size, seed=seed + 1)
    x, y = torch.from_numpy(x), torch.from_numpy(y)
    opt = torch.optim.AdamW(list(encoder.parameters()) + list(probe.parameters()), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    encoder.train()
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch_size):
            idx = perm[i : i + batch_size]
            loss = F.cross_entropy(probe(encoder(x[idx])), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    encoder.eval()
    return encoder


def external_backbone(spec: BackboneSpec, provider: str = "standin", seed: int = 0) -> Backbone:
    if provider == "torchvision":
        if spec.family != "convnext_tiny_style" or spec.stage_widths != (96, 192, 384, 768):
            raise ValueError("torchvision weights exist only for the ConvNeXt-Tiny layout")
        return load_torchvision_convnext_tiny(spec.image_size)
    if provider == "standin":
        return standin_backbone(spec, seed=seed)
    raise ValueError(f"unknown provider {provider!r}")
