import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dermssl.backbones import (
    BackboneSpec,
    build_encoder,
    checksum,
    convert_torchvision_convnext,
    count_parameters,
    stage_checksums,
)
from dermssl.errors import ConfigError, FrozenBackboneError, ShapeError
from dermssl.head import (
    ClassifierHead,
    FocalParams,
    HeadAudit,
    HeadSpec,
    classify,
    extract_features,
    final_stage_parameter_count,
    focal_loss,
    freeze,
    is_frozen,
    unfreeze_final_stage,
    verify_frozen,
)
from dermssl.optim import AdamWScheduleFree
from oracles import cross_entropy, focal

FOCAL_HAND = 0.0010536051565782628  # -(0.1 ** 2) * ln(0.9)
TOY = BackboneSpec("toy_cnn", (8, 16, 32), image_size=16)


def logits_with_target_prob(p, n_classes=3):
    # logits (log p, log q, log q, ...) give softmax probability p on class 0
    q = (1 - p) / (n_classes - 1)
    return torch.tensor([math.log(p)] + [math.log(q)] * (n_classes - 1), dtype=torch.float64)


def test_focal_equals_cross_entropy_at_gamma_zero():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 4, size=(1000, 3))
    targets = rng.integers(0, 3, size=1000)
    got = focal_loss(torch.tensor(logits), torch.tensor(targets), gamma=0.0, alpha=[1.0, 1.0, 1.0], reduction="none")
    expected = np.array([cross_entropy(list(l), t) for l, t in zip(logits, targets)])
    assert np.abs(got.numpy() - expected).max() <= 1e-9


def test_focal_hand_case():
    loss = focal_loss(logits_with_target_prob(0.9), 0, gamma=2.0)
    assert abs(float(loss) - FOCAL_HAND) <= 1e-9


def test_focal_matches_oracle_with_alpha():
    rng = np.random.default_rng(1)
    alpha = [0.5, 1.2, 1.3]
    logits = rng.normal(0, 2, size=(50, 3))
    targets = rng.integers(0, 3, size=50)
    got = focal_loss(torch.tensor(logits), torch.tensor(targets), 2.0, alpha, reduction="none").numpy()
    expected = [focal(list(l), t, 2.0, alpha[t]) for l, t in zip(logits, targets)]
    assert np.abs(got - expected).max() <= 1e-12
    mean = focal_loss(torch.tensor(logits), torch.tensor(targets), 2.0, alpha)
    assert float(mean) == pytest.approx(np.mean(expected), abs=1e-12)


def test_focal_confident_correct_vanishes():
    assert float(focal_loss(torch.tensor([20.0, 0.0, 0.0], dtype=torch.float64), 0)) < 1e-6


def test_focal_errors():
    with pytest.raises(ValueError):
        focal_loss(torch.tensor([float("inf"), 0.0, 0.0]), 0)
    with pytest.raises(ValueError):
        focal_loss(torch.zeros(3), 3)


@settings(max_examples=60)
@given(
    st.floats(0.1, 5.0),
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    st.floats(-5, 5),
    st.floats(0.01, 3),
)
def test_focal_decreases_as_target_logit_rises(gamma, others, target_logit, delta):
    def loss(t):
        return float(focal_loss(torch.tensor([t, *others], dtype=torch.float64), 0, gamma))

    assert loss(target_logit + delta) < loss(target_logit)


def test_focal_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    logits = torch.tensor(rng.normal(0, 2, size=(6, 3)), requires_grad=True)
    targets = torch.tensor(rng.integers(0, 3, size=6))
    alpha = [0.7, 1.0, 1.3]
    focal_loss(logits, targets, 2.0, alpha).backward()
    numeric = torch.zeros_like(logits)
    h = 1e-5
    with torch.no_grad():
        for idx in np.ndindex(*logits.shape):
            up, down = logits.detach().clone(), logits.detach().clone()
            up[idx] += h
            down[idx] -= h
            numeric[idx] = (focal_loss(up, targets, 2.0, alpha) - focal_loss(down, targets, 2.0, alpha)) / (2 * h)
    rel = (logits.grad - numeric).norm() / numeric.norm()
    assert rel <= 1e-3


def test_focal_params():
    fp = FocalParams.inverse_frequency([100, 50, 25])
    assert np.mean(fp.alpha) == pytest.approx(1.0)
    assert fp.alpha[0] < fp.alpha[1] < fp.alpha[2]
    assert fp.alpha[2] / fp.alpha[0] == pytest.approx(4.0)
    assert FocalParams.inverse_frequency([10, 10, 10]).alpha == (1.0, 1.0, 1.0)
    with pytest.raises(ConfigError):
        FocalParams(-1.0)
    with pytest.raises(ConfigError):
        FocalParams(2.0, (1.0, 0.0, 1.0))


def test_head_layout_and_parity():
    head = ClassifierHead()
    assert [tuple(p.shape) for p in head.parameters()] == [(256, 768), (256,), (3, 256), (3,)]
    assert count_parameters(head) == 768 * 256 + 256 + 256 * 3 + 3
    a, b = HeadAudit.of(ClassifierHead()), HeadAudit.of(ClassifierHead())
    assert a == b
    with pytest.raises(ConfigError):
        HeadSpec(dropout_rate=1.0)


def test_classify_examples():
    head = ClassifierHead()
    for p in head.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(classify(torch.zeros(768), head), torch.zeros(3))
    head = ClassifierHead()
    f = torch.randn(768)
    assert torch.equal(classify(f, head, "eval"), classify(f, head, "eval"))
    with pytest.raises(ShapeError):
        classify(torch.zeros(767), head)
    with pytest.raises(ValueError):
        classify(f, head, "test")


def test_dropout_preserves_expected_activation():
    torch.manual_seed(0)
    head = ClassifierHead(HeadSpec(16, 8, 3, 0.5))
    with torch.no_grad():
        head.fc1.weight.copy_(torch.rand(8, 16) + 0.1)
    feature = torch.rand(16)
    head.eval()
    with torch.no_grad():
        reference = head.hidden(feature)
        head.train()
        passes = torch.stack([head.hidden(feature) for _ in range(10_000)])
    assert (reference > 0).all()
    assert ((passes.mean(0) - reference).abs() <= 0.05 * reference).all()
    assert ((passes == 0).float().mean() - 0.5).abs() < 0.02


def test_freeze_and_extract():
    backbone = build_encoder(TOY)
    with pytest.raises(FrozenBackboneError):
        extract_features(torch.rand(3, 16, 16), backbone)
    freeze(backbone)
    before = checksum(backbone)
    freeze(backbone)
    assert backbone.frozen_checksum == before and is_frozen(backbone)
    img = torch.rand(3, 16, 16)
    first = extract_features(img, backbone)
    assert first.shape == (32,)
    for _ in range(100):
        assert torch.equal(extract_features(img, backbone), first)
    assert checksum(backbone) == before and verify_frozen(backbone)


def test_head_step_leaves_frozen_backbone_untouched():
    backbone = freeze(build_encoder(TOY))
    head = ClassifierHead(HeadSpec(32, 16, 3))
    before = checksum(backbone)
    opt = AdamWScheduleFree(head.parameters(), lr=1e-2)
    loss = focal_loss(head(backbone(torch.rand(4, 3, 16, 16))), torch.tensor([0, 1, 2, 0]))
    loss.backward()
    opt.step()
    assert checksum(backbone) == before
    assert all(p.grad is None for p in backbone.parameters())


def test_unfreeze_final_stage():
    backbone = build_encoder(TOY)
    with pytest.raises(FrozenBackboneError):
        unfreeze_final_stage(backbone)
    freeze(backbone)
    base = stage_checksums(backbone)
    head = ClassifierHead(HeadSpec(32, 16, 3))
    params = unfreeze_final_stage(backbone)
    trainable = count_parameters(head, True) + count_parameters(backbone, True)
    assert trainable == final_stage_parameter_count(backbone) + count_parameters(head)
    assert sum(p.numel() for p in params) == final_stage_parameter_count(backbone)
    opt = torch.optim.SGD([*head.parameters(), *params], lr=0.1)
    focal_loss(head(backbone(torch.rand(4, 3, 16, 16))), torch.tensor([0, 1, 2, 0])).backward()
    opt.step()
    after = stage_checksums(backbone)
    assert after["final"] != base["final"]
    assert {k: v for k, v in after.items() if k != "final"} == {k: v for k, v in base.items() if k != "final"}


def test_convnext_final_stage_includes_norm():
    backbone = build_encoder(BackboneSpec("convnext_tiny_style", (8, 16), (1, 1), image_size=16))
    groups = backbone.stage_groups()
    assert list(groups) == ["stem", "stage0", "final"]
    assert backbone.norm in groups["final"]


def test_torchvision_key_mapping_reproduces_features():
    torchvision = pytest.importorskip("torchvision")
    torch.manual_seed(0)
    tv = torchvision.models.convnext_tiny(weights=None).eval()
    ours = build_encoder(BackboneSpec.convnext_tiny(image_size=32)).eval()
    ours.load_state_dict(convert_torchvision_convnext(tv.state_dict()))
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        expected = tv.classifier[1](tv.classifier[0](tv.avgpool(tv.features(x))))
        got = ours.forward_features(x)
    assert got.shape == (2, 768)
    assert torch.allclose(got, expected, atol=1e-5)


def test_copied_backbone_keeps_freeze_state():
    backbone = freeze(build_encoder(TOY))
    clone = copy.deepcopy(backbone)
    assert is_frozen(clone) and clone.frozen_checksum == backbone.frozen_checksum
