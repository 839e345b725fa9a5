"""Schedule-free AdamW.

Keeps two sequences per parameter: ``z``, the base Adam-style iterate, and
``x``, a running weighted average of ``z``. Gradients are taken at the
interpolation ``y = (1 - beta1) * z + beta1 * x`` which lives in ``p`` during
training. ``eval()`` swaps ``p`` to ``x`` and ``train()`` swaps it back, so
the optimizer must be switched alongside the model.
"""
from __future__ import annotations

import torch
from torch.optim import Optimizer


class AdamWScheduleFree(Optimizer):
    def __init__(
        self,
        params,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        warmup_steps: int = 0,
        r: float = 0.0,
        weight_lr_power: float = 2.0,
    ):
        if lr <= 0.0:
            raise ValueError(f"invalid learning rate: {lr}")
        if not 0.0 < betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ValueError(f"invalid betas: {betas}")
        if weight_decay < 0.0:
            raise ValueError(f"invalid weight_decay: {weight_decay}")
        defaults = dict(
            lr=lr,
            betas=betas,
            eps=eps,
            weight_decay=weight_decay,
            warmup_steps=warmup_steps,
            r=r,
            weight_lr_power=weight_lr_power,
            k=0,
            lr_max=0.0,
            weight_sum=0.0,
            train_mode=True,
        )
        super().__init__(params, defaults)

    def hyperparameters(self) -> dict:
        g = self.defaults
        return {
            "name": "adamw_schedule_free",
            "lr": g["lr"],
            "betas": list(g["betas"]),
            "eps": g["eps"],
            "weight_decay": g["weight_decay"],
            "warmup_steps": g["warmup_steps"],
            "r": g["r"],
            "weight_lr_power": g["weight_lr_power"],
        }

    @property
    def train_mode(self) -> bool:
        return all(g["train_mode"] for g in self.param_groups)

    def add_param_group(self, param_group: dict) -> None:
        # joining groups start in the optimizer's current mode with fresh counters
        mode = all(g["train_mode"] for g in getattr(self, "param_groups", []))
        param_group = dict(param_group)
        for key in ("k", "lr_max", "weight_sum"):
            param_group.setdefault(key, self.defaults[key])
        param_group.setdefault("train_mode", mode)
        super().add_param_group(param_group)

    @torch.no_grad()
    def eval(self) -> None:
        for group in self.param_groups:
            if group["train_mode"]:
                beta1 = group["betas"][0]
                for p in group["params"]:
                    state = self.state[p]
                    if "z" in state:
                        p.lerp_(state["z"], 1 - 1 / beta1)
                group["train_mode"] = False

    @torch.no_grad()
    def train(self) -> None:
        for group in self.param_groups:
            if not group["train_mode"]:
                beta1 = group["betas"][0]
                for p in group["params"]:
                    state = self.state[p]
                    if "z" in state:
                        p.lerp_(state["z"], 1 - beta1)
                group["train_mode"] = True

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            if not group["train_mode"]:
                raise RuntimeError("optimizer.train() must be called before step()")
            if not any(p.grad is not None for p in group["params"]):
                continue
            beta1, beta2 = group["betas"]
            k = group["k"]
            warmup = group["warmup_steps"]
            sched = (k + 1) / warmup if k < warmup else 1.0
            lr = group["lr"] * sched
            bias_correction2 = 1 - beta2 ** (k + 1)

            lr_max = group["lr_max"] = max(lr, group["lr_max"])
            weight = ((k + 1) ** group["r"]) * (lr_max ** group["weight_lr_power"])
            weight_sum = group["weight_sum"] = group["weight_sum"] + weight
            ckp1 = weight / weight_sum if weight_sum else 0.0
            adaptive_y_lr = lr * (beta1 * (1 - ckp1) - 1)

            for p in group["params"]:
                if p.grad is None:
                    continue
                y = p
                grad = p.grad
                state = self.state[p]
                if "z" not in state:
                    state["z"] = p.detach().clone()
                    state["exp_avg_sq"] = torch.zeros_like(p)
                z = state["z"]
                exp_avg_sq = state["exp_avg_sq"]

                exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
                denom = exp_avg_sq.div(bias_correction2).sqrt_().add_(group["eps"])
                grad_normalized = grad.div(denom)
                if group["weight_decay"]:
                    # decoupled decay, evaluated at y
                    grad_normalized.add_(y, alpha=group["weight_decay"])

                y.lerp_(z, ckp1)
                y.add_(grad_normalized, alpha=adaptive_y_lr)
                z.sub_(grad_normalized, alpha=lr)

            group["k"] = k + 1
        return loss
