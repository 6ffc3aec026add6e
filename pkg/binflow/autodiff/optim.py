from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from loguru import logger

from binflow.autodiff.tensor import Tensor


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name, plus the global step count."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def learning_rate_at(step: int, lr: float, warmup: int) -> float:
    """Constant during warmup, then inverse-sqrt decay anchored at the warmup step."""
    if warmup <= 0 or step <= warmup:
        return lr
    return lr * math.sqrt(warmup / step)


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float):
    """
    Scale all gradients jointly so that their global L2 norm is at most ``max_norm``.

    :return: (clipped gradients, norm before clipping)
    """
    total = math.sqrt(float(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads.values()])))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}, total
    return dict(grads), total


def clip_by_group_norm(grads: Mapping[str, np.ndarray], groups: Sequence[Sequence[str]], max_norm: float):
    """
    Clip each group of gradients by its own global norm. Names outside every
    group are clipped together as one more group.

    :return: (clipped gradients, norm before clipping per non-empty group)
    """
    listed: List[str] = [name for group in groups for name in group]
    seen = set(listed)
    if len(seen) != len(listed):
        raise ValueError("Gradient groups overlap")
    rest = [name for name in grads if name not in seen]
    clipped: Dict[str, np.ndarray] = {}
    norms: List[float] = []
    for names in [*groups, rest]:
        part = {name: grads[name] for name in names if name in grads}
        if not part:
            continue
        out, norm = clip_by_global_norm(part, max_norm)
        clipped.update(out)
        norms.append(norm)
    return clipped, norms


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    warmup: int = 0,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
    max_grad_norm: float = 5.0,
    groups: Optional[Sequence[Sequence[str]]] = None,
) -> OptimizerState:
    """
    One Adam update in place on ``params``.

    Clipping happens before the moment update, over all gradients jointly or,
    with ``groups``, per group. Every parameter must have a gradient.
    """
    missing = [name for name in params if name not in grads or grads[name] is None]
    if missing:
        raise ValueError(f"Missing gradients for parameters: {missing[:5]}")

    selected = {k: grads[k] for k in params}
    if groups:
        clipped, norms = clip_by_group_norm(selected, groups, max_grad_norm)
    else:
        clipped, norm = clip_by_global_norm(selected, max_grad_norm)
        norms = [norm]
    state.step += 1
    step_lr = learning_rate_at(state.step, lr, warmup)
    beta1, beta2 = betas
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step

    for name, param in params.items():
        grad = clipped[name].astype(param.data.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        update = step_lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        param.data = (param.data - update).astype(param.data.dtype, copy=False)

    logger.debug(f"adam step={state.step} lr={step_lr:.6g} grad_norm={', '.join(f'{n:.4f}' for n in norms)}")
    return state


class AdamOptimizer:
    """
    Adam over a fixed set of named parameters, reading gradients from ``Tensor.grad``.

    :param params: name -> parameter tensor
    :param lr: base learning rate
    :param warmup: steps at constant rate before inverse-sqrt decay
    :param max_grad_norm: global-norm clipping threshold
    :param groups: parameter-name groups clipped separately; the remaining names form one more group
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-4,
        warmup: int = 4000,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        max_grad_norm: float = 5.0,
        state: Optional[OptimizerState] = None,
        groups: Optional[Sequence[Sequence[str]]] = None,
    ):
        self.params = dict(params)
        self.lr = lr
        self.warmup = warmup
        self.betas = tuple(betas)
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.state = state or OptimizerState()
        self.groups = [list(group) for group in groups or ()]

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def step(self, scale: float = 1.0) -> None:
        """
        Apply one update. Parameters the loss never touched get a zero gradient.

        :param scale: multiplier applied to accumulated gradients (1/N for N micro-batches)
        """
        grads = {
            name: (np.zeros_like(p.data) if p.grad is None else p.grad * scale)
            for name, p in self.params.items()
        }
        adam_step(
            self.params,
            grads,
            self.state,
            lr=self.lr,
            warmup=self.warmup,
            betas=self.betas,
            eps=self.eps,
            max_grad_norm=self.max_grad_norm,
            groups=self.groups,
        )
        self.zero_grad()

    @property
    def current_lr(self) -> float:
        return learning_rate_at(max(self.state.step, 1), self.lr, self.warmup)
