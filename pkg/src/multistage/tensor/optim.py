"""Optimizers: SGD (optionally Nesterov), AdamW, and full-batch L-BFGS."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize as _sciopt

from .core import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, param_id: str):
        super().__init__(f"non-finite gradient for parameter {param_id}")
        self.param_id = param_id


@dataclass
class OptimizerState:
    kind: str
    lr: float = 0.1
    momentum: float = 0.0
    nesterov: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "sgd_nesterov", "adamw", "quasi_newton_full_batch"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.kind == "sgd_nesterov":
            self.nesterov = True


def optimizer_step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[np.ndarray],
                   lr: float | None = None, weight_decays: Sequence[float] | None = None,
                   names: Sequence[str] | None = None, lrs: Sequence[float] | None = None) -> None:
    """Apply one update in place. ``weight_decays`` and ``lrs`` override per-param values."""
    lr = state.lr if lr is None else lr
    if lr < 0 or (lrs is not None and min(lrs, default=0) < 0):
        raise ValueError("learning rate must be non-negative")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    state.step_count += 1
    t = state.step_count
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(names[i] if names else str(i))
        wd = state.weight_decay if weight_decays is None else weight_decays[i]
        step_lr = lr if lrs is None else lrs[i]
        slot = state.moments.setdefault(i, {})
        w = p.data
        if state.kind in ("sgd", "sgd_nesterov"):
            d = g + wd * w if wd else g
            if state.momentum:
                buf = slot.get("momentum")
                buf = d.copy() if buf is None else state.momentum * buf + d
                slot["momentum"] = buf
                d = d + state.momentum * buf if state.nesterov else buf
            p.data = (w - step_lr * d).astype(w.dtype)
        elif state.kind == "adamw":
            b1, b2 = state.betas
            m = slot.get("m", np.zeros_like(w))
            v = slot.get("v", np.zeros_like(w))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            slot["m"], slot["v"] = m, v
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            w = w * (1 - step_lr * wd) if wd else w
            p.data = (w - step_lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
        else:
            raise ValueError("quasi_newton_full_batch is driven by lbfgs_minimize, not optimizer_step")


class Optimizer:
    """Stateful wrapper binding an :class:`OptimizerState` to named parameter groups.

    ``groups`` is a list of dicts with keys ``params`` and optional
    ``weight_decay`` and ``lr`` (a per-group rate that overrides the step's).
    """

    def __init__(self, params, kind: str = "sgd", lr: float = 0.1, **hyper):
        if params and isinstance(params[0], dict):
            groups = params
        else:
            groups = [{"params": list(params)}]
        self.groups = groups
        self.state = OptimizerState(kind=kind, lr=lr, **hyper)

    @property
    def params(self) -> list[Tensor]:
        return [p for grp in self.groups for p in grp["params"]]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.state.lr if lr is None else lr
        params, grads, decays, lrs = [], [], [], []
        for grp in self.groups:
            wd = grp.get("weight_decay", self.state.weight_decay)
            for p in grp["params"]:
                params.append(p)
                grads.append(p.grad)
                decays.append(wd)
                lrs.append(grp.get("lr", lr))
        optimizer_step(self.state, params, grads, lr, decays, lrs=lrs)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale ``.grad`` of ``params`` in place so the global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if total > max_norm and total > 0:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


def lbfgs_minimize(params: Sequence[Tensor], closure: Callable[[], Tensor], max_iter: int = 1000,
                   tol: float = 1e-9) -> float:
    """Full-batch L-BFGS over ``params``; ``closure`` rebuilds the loss graph."""
    from .core import grad as _grad

    shapes = [p.data.shape for p in params]
    sizes = [p.data.size for p in params]
    dtypes = [p.data.dtype for p in params]

    def unpack(vec):
        off = 0
        for p, shp, n, dt in zip(params, shapes, sizes, dtypes):
            p.data = vec[off:off + n].reshape(shp).astype(dt)
            off += n

    def fun(vec):
        unpack(vec)
        loss = closure()
        gs = _grad(loss, params)
        return float(loss.data), np.concatenate([g.reshape(-1) for g in gs]).astype(np.float64)

    x0 = np.concatenate([p.data.reshape(-1) for p in params]).astype(np.float64)
    res = _sciopt.minimize(fun, x0, jac=True, method="L-BFGS-B",
                           options={"maxiter": max_iter, "gtol": tol, "ftol": tol})
    unpack(res.x)
    return float(res.fun)
