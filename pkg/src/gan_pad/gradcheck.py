"""Central finite-difference checks of autograd gradients."""

from __future__ import annotations

import torch


def flat_params(module) -> list:
    return [p for p in module.parameters() if p.requires_grad]


def finite_difference_check(loss_fn, params, h=1e-6, floor=1e-4, atol=1e-12) -> dict:
    """Compare autograd gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be deterministic (reseed any randomness inside it).
    Relative error per element is ``|a - n| / max(|a|, |n|, d)`` where
    ``d = max(atol, floor * max|a|)``: entries far below the gradient's scale
    are judged against that scale, since central differences carry an
    absolute round-off error of roughly ``eps * |loss| / h``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if a is None else a.detach() for p, a in zip(params, analytic)]

    scale = max((float(a.abs().max()) for a in analytic if a.numel()), default=0.0)
    denom_floor = max(atol, floor * scale)
    max_rel = 0.0
    max_abs = 0.0
    n = 0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            flat = p.view(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                with torch.enable_grad():
                    up = float(loss_fn().detach())
                flat[i] = orig - h
                with torch.enable_grad():
                    down = float(loss_fn().detach())
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                ana = float(a_flat[i])
                diff = abs(ana - numeric)
                rel = diff / max(abs(ana), abs(numeric), denom_floor)
                max_rel = max(max_rel, rel)
                max_abs = max(max_abs, diff)
                n += 1
    return {"max_relative_error": max_rel, "max_absolute_error": max_abs, "gradient_scale": scale, "n_params": n}
