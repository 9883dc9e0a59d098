"""Parameter update rules: plain/momentum SGD and Adam.

`opt_step` is functional over explicit state so callers can checkpoint or
inspect it; `Optimizer` is the convenience wrapper the training loops use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf; the step was not applied."""


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "sgd"  # "sgd" | "adam"
    lr: float = 0.01
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class OptimState:
    step: int
    slots: list  # per-param dict of numpy buffers

    @staticmethod
    def for_params(params) -> "OptimState":
        return OptimState(step=0, slots=[{} for _ in params])


def opt_step(params, grads, state: OptimState, config: OptimConfig) -> OptimState:
    """Apply one update in place on each param's data; returns the state.

    Plain SGD (momentum 0) is exactly p' = p - lr * g. Non-finite gradients
    raise NonFiniteGradientError before any parameter is touched.
    """
    config.validate()
    if len(params) != len(grads) or len(params) != len(state.slots):
        raise ValueError("params, grads and state must have equal length")
    for p, g in zip(params, grads):
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient encountered")
    state.step += 1
    for p, g, slot in zip(params, grads, state.slots):
        if g is None:
            continue
        g = np.asarray(g, dtype=p.data.dtype)
        if config.kind == "sgd":
            if config.momentum > 0.0:
                buf = slot.get("momentum")
                if buf is None:
                    buf = np.zeros_like(p.data)
                buf = config.momentum * buf + g
                slot["momentum"] = buf
                p.data -= np.asarray(config.lr * buf, dtype=p.data.dtype)
            else:
                p.data -= np.asarray(config.lr * g, dtype=p.data.dtype)
        else:  # adam
            m = slot.get("m")
            v = slot.get("v")
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = config.beta1 * m + (1.0 - config.beta1) * g
            v = config.beta2 * v + (1.0 - config.beta2) * (g * g)
            slot["m"], slot["v"] = m, v
            mhat = m / (1.0 - config.beta1**state.step)
            vhat = v / (1.0 - config.beta2**state.step)
            p.data -= np.asarray(
                config.lr * mhat / (np.sqrt(vhat) + config.eps), dtype=p.data.dtype
            )
    return state


class Optimizer:
    """Bundles params + state; reads gradients off the tensors."""

    def __init__(self, params: list[Tensor], config: OptimConfig):
        config.validate()
        self.params = list(params)
        self.config = config
        self.state = OptimState.for_params(self.params)

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        opt_step(self.params, grads, self.state, self.config)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
