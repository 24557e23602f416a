"""Central finite-difference oracle for parameter gradients (double precision)."""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple, Union

import numpy as np
import torch


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def probe_gradients(
    module: torch.nn.Module,
    loss_fn: Callable[[], Union[torch.Tensor, Tuple[torch.Tensor, object]]],
    probes: int = 20,
    step: float = 1e-4,
    seed: int = 0,
) -> Dict[str, List[float]]:
    """Relative error of autograd vs central differences on random entries of every parameter.

    ``loss_fn`` may return ``(loss, discrete)`` where ``discrete`` must not
    change under the perturbation (e.g. selected token indices); a change
    raises, since the loss is then not differentiable at that point.
    """
    module.zero_grad(set_to_none=True)
    loss, reference = _split(loss_fn())
    loss.backward()
    grads = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for n, p in module.named_parameters()}
    rng = np.random.default_rng(seed)
    errors: Dict[str, List[float]] = {}
    with torch.no_grad():
        for name, p in module.named_parameters():
            flat = p.view(-1)
            picks = rng.choice(flat.numel(), size=min(probes, flat.numel()), replace=False)
            errs = []
            for i in picks:
                old = flat[i].item()
                flat[i] = old + step
                up, d_up = _split(loss_fn())
                flat[i] = old - step
                down, d_down = _split(loss_fn())
                flat[i] = old
                if not (_same(d_up, reference) and _same(d_down, reference)):
                    raise AssertionError(f"perturbing {name}[{i}] changed a discrete choice")
                up, down = up.item(), down.item()
                numeric = (up - down) / (2 * step)
                errs.append(rel_error(grads[name].view(-1)[i].item(), numeric))
            errors[name] = errs
    return errors


def _split(out):
    if isinstance(out, tuple):
        return out
    return out, None


def _same(a, b) -> bool:
    if isinstance(a, torch.Tensor):
        return torch.equal(a, b)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b
