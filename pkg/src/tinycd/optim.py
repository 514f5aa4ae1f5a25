"""AdamW with decoupled weight decay and the warm-restart-free cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, UsageError
from .tensor import Parameter


@dataclass
class ScheduleConfig:
    lr_max: float = 3e-3
    lr_min: float = 0.0
    total_epochs: int = 100

    def __post_init__(self):
        if not (0.0 <= self.lr_min <= self.lr_max):
            raise ConfigurationError(f"need 0 <= lr_min <= lr_max, got {self.lr_min} / {self.lr_max}")
        if self.total_epochs < 1:
            raise ConfigurationError(f"total_epochs must be >= 1, got {self.total_epochs}")


def cosine_lr(epoch: int, cfg: ScheduleConfig) -> float:
    """Half-cosine decay from lr_max (epoch 0) to lr_min (final epoch), no restarts."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise UsageError(f"epoch {epoch} outside schedule range [0, {cfg.total_epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch / cfg.total_epochs))


class AdamW:
    """Adam with bias correction and weight decay applied directly to the weights.

    Update per step: m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2;
    w <- w - lr * mhat / (sqrt(vhat) + eps) - lr * weight_decay * w,
    where vhat is replaced by its running maximum under amsgrad.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-3,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        amsgrad: bool = False,
    ):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate parameter names in optimizer: {names}")
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.amsgrad = amsgrad
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.v_max = [np.zeros_like(p.data) for p in self.params] if amsgrad else None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise UsageError(f"parameter {p.name!r} has no gradient; run backward before step")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            if self.amsgrad:
                np.maximum(self.v_max[i], v_hat, out=self.v_max[i])
                v_hat = self.v_max[i]
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps) - self.lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    # -- checkpoint support ---------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, p in enumerate(self.params):
            out[f"optimizer.m.{p.name}"] = self.m[i]
            out[f"optimizer.v.{p.name}"] = self.v[i]
            if self.amsgrad:
                out[f"optimizer.vmax.{p.name}"] = self.v_max[i]
        return out

    def hyperparams(self) -> dict:
        return {
            "step": self.t,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "amsgrad": self.amsgrad,
        }

    def load_state(self, hyper: dict, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(hyper["step"])
        self.lr = float(hyper["lr"])
        self.weight_decay = float(hyper["weight_decay"])
        self.beta1 = float(hyper["beta1"])
        self.beta2 = float(hyper["beta2"])
        self.eps = float(hyper["eps"])
        self.amsgrad = bool(hyper["amsgrad"])
        if self.amsgrad and self.v_max is None:
            self.v_max = [np.zeros_like(p.data) for p in self.params]
        for i, p in enumerate(self.params):
            self.m[i] = tensors[f"optimizer.m.{p.name}"].copy()
            self.v[i] = tensors[f"optimizer.v.{p.name}"].copy()
            if self.amsgrad:
                self.v_max[i] = tensors[f"optimizer.vmax.{p.name}"].copy()
