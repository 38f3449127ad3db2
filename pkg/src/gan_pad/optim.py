"""Bias-corrected Adam, written out so its arithmetic is fixed and testable."""

from __future__ import annotations

import torch


def adam_state(params) -> dict:
    return {
        "step": 0,
        "m": [torch.zeros_like(p) for p in params],
        "v": [torch.zeros_like(p) for p in params],
    }


@torch.no_grad()
def adam_step(params, grads, state, lr, beta1, beta2, eps=1e-8):
    """One Adam update applied in place; returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise ValueError("params, grads and state must have the same length")
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return params, state


class Adam:
    """Minimal optimizer object over ``adam_step`` using ``.grad`` fields."""

    def __init__(self, params, lr, beta1, beta2, eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = adam_state(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)

    @property
    def steps(self) -> int:
        return self.state["step"]
