"""AdamW with decoupled weight decay, written out explicitly.

Parameters are registered with their names so gradient problems can be
reported precisely and so optimizer state can round-trip through the
checkpoint container by name.
"""

from __future__ import annotations

import numpy as np
import torch


class AdamW(torch.optim.Optimizer):
    def __init__(
        self,
        named_params,
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        named_params = list(named_params)
        names = [n for n, _ in named_params]
        params = [p for _, p in named_params]
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__([{"params": params, "names": names}], defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr = group["lr"]
            beta1, beta2 = group["betas"]
            eps = group["eps"]
            wd = group["weight_decay"]
            for name, p in zip(group["names"], group["params"]):
                if p.grad is None:
                    continue
                grad = p.grad
                if not torch.isfinite(grad).all():
                    raise ValueError(f"non-finite gradient in parameter {name}")
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["exp_avg"], state["exp_avg_sq"]

                if wd:
                    p.mul_(1.0 - lr * wd)
                m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
                v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
                m_hat = m / (1.0 - beta1**t)
                v_hat = v / (1.0 - beta2**t)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
        return loss

    # --- checkpoint support ---

    def export_state(self) -> tuple[dict[str, np.ndarray], dict[str, int]]:
        """Moment arrays keyed by parameter name, plus per-parameter steps."""
        arrays: dict[str, np.ndarray] = {}
        steps: dict[str, int] = {}
        for group in self.param_groups:
            for name, p in zip(group["names"], group["params"]):
                state = self.state.get(p)
                if not state:
                    continue
                arrays[f"{name}/exp_avg"] = state["exp_avg"].detach().numpy().copy()
                arrays[f"{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().numpy().copy()
                steps[name] = state["step"]
        return arrays, steps

    def import_state(self, arrays: dict[str, np.ndarray], steps: dict[str, int]) -> None:
        for group in self.param_groups:
            for name, p in zip(group["names"], group["params"]):
                if name not in steps:
                    continue
                self.state[p] = {
                    "step": int(steps[name]),
                    "exp_avg": torch.from_numpy(arrays[f"{name}/exp_avg"].copy()).to(p.dtype),
                    "exp_avg_sq": torch.from_numpy(arrays[f"{name}/exp_avg_sq"].copy()).to(p.dtype),
                }
