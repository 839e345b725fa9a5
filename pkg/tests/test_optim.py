import numpy as np
import pytest
import torch

from dermssl.optim import AdamWScheduleFree


def reference_run(x0, grad_fn, steps, lr, betas, eps, wd, warmup, weight_lr_power=2.0):
    """Explicit three-sequence form: gradient at y, Adam step on z, weighted average x."""
    b1, b2 = betas
    z = x0.copy()
    x = x0.copy()
    v = np.zeros_like(x0)
    weight_sum, lr_max = 0.0, 0.0
    for k in range(steps):
        y = (1 - b1) * z + b1 * x
        g = grad_fn(y)
        lr_k = lr * min(1.0, (k + 1) / warmup) if warmup else lr
        v = b2 * v + (1 - b2) * g * g
        step = g / (np.sqrt(v / (1 - b2 ** (k + 1))) + eps) + wd * y
        z = z - lr_k * step
        lr_max = max(lr_max, lr_k)
        w = lr_max**weight_lr_power
        weight_sum += w
        c = w / weight_sum
        x = (1 - c) * x + c * z
    return x, (1 - b1) * z + b1 * x


def quadratic_grad(a, b):
    return lambda y: 2 * a * (y - b)


@pytest.mark.parametrize("wd,warmup", [(0.0, 0), (0.01, 0), (0.0, 5), (0.05, 3)])
def test_matches_reference_recurrences(wd, warmup):
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0.5, 2.0, 6), rng.normal(size=6)
    x0 = rng.normal(size=6)
    p = torch.nn.Parameter(torch.tensor(x0))
    opt = AdamWScheduleFree([p], lr=0.05, betas=(0.9, 0.999), weight_decay=wd, warmup_steps=warmup)
    at, bt = torch.tensor(a), torch.tensor(b)
    for _ in range(25):
        opt.zero_grad()
        (at * (p - bt) ** 2).sum().backward()
        opt.step()
    x_ref, y_ref = reference_run(x0, quadratic_grad(a, b), 25, 0.05, (0.9, 0.999), 1e-8, wd, warmup)
    assert np.allclose(p.detach().numpy(), y_ref, atol=1e-10)
    opt.eval()
    assert np.allclose(p.detach().numpy(), x_ref, atol=1e-10)
    opt.train()
    assert np.allclose(p.detach().numpy(), y_ref, atol=1e-10)


def test_converges_on_quadratic():
    b = torch.tensor([1.0, -2.0, 0.5])
    p = torch.nn.Parameter(torch.zeros(3))
    opt = AdamWScheduleFree([p], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ((p - b) ** 2).sum().backward()
        opt.step()
    opt.eval()
    assert torch.allclose(p.detach(), b, atol=1e-2)


def test_step_requires_train_mode():
    p = torch.nn.Parameter(torch.ones(2))
    opt = AdamWScheduleFree([p])
    p.sum().backward()
    opt.eval()
    assert not opt.train_mode
    with pytest.raises(RuntimeError):
        opt.step()
    opt.train()
    opt.step()


def test_mode_switch_before_first_step_is_identity():
    p = torch.nn.Parameter(torch.tensor([1.0, 2.0]))
    opt = AdamWScheduleFree([p])
    opt.eval()
    opt.train()
    assert torch.equal(p.detach(), torch.tensor([1.0, 2.0]))


def test_groups_without_gradients_are_untouched():
    a, b = torch.nn.Parameter(torch.ones(2)), torch.nn.Parameter(torch.ones(2))
    opt = AdamWScheduleFree([{"params": [a]}, {"params": [b]}], lr=0.1)
    (a * 3).sum().backward()
    opt.step()
    assert torch.equal(b.detach(), torch.ones(2))
    assert opt.param_groups[0]["k"] == 1 and opt.param_groups[1]["k"] == 0
    assert not torch.equal(a.detach(), torch.ones(2))


def test_added_group_joins_in_current_mode():
    a = torch.nn.Parameter(torch.ones(2))
    opt = AdamWScheduleFree([a], lr=0.1)
    opt.eval()
    b = torch.nn.Parameter(torch.ones(2))
    opt.add_param_group({"params": [b]})
    assert opt.param_groups[1]["train_mode"] is False
    opt.train()
    (a.sum() + b.sum()).backward()
    opt.step()
    assert opt.param_groups[1]["k"] == 1


def test_no_learning_rate_decay():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = AdamWScheduleFree([p], lr=0.01, warmup_steps=0)
    for _ in range(50):
        opt.zero_grad()
        p.sum().backward()
        opt.step()
    assert opt.param_groups[0]["lr"] == 0.01
    hp = opt.hyperparameters()
    assert hp["name"] == "adamw_schedule_free" and hp["betas"] == [0.9, 0.999]


def test_invalid_arguments():
    p = [torch.nn.Parameter(torch.zeros(1))]
    with pytest.raises(ValueError):
        AdamWScheduleFree(p, lr=0.0)
    with pytest.raises(ValueError):
        AdamWScheduleFree(p, betas=(1.0, 0.9))
    with pytest.raises(ValueError):
        AdamWScheduleFree(p, weight_decay=-1)
