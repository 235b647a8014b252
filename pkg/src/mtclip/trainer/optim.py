"""AdamW with decoupled weight decay."""

from __future__ import annotations

import dataclasses
from typing import Dict, Mapping, Tuple

import numpy as np

from mtclip.errors import ConfigError
from mtclip.tensor import Tensor


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    betas: Tuple[float, ...] = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def validate(self) -> "OptimizerConfig":
        if self.kind != "adamw":
            raise ConfigError(f"optimizer kind must be 'adamw', got {self.kind!r}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight_decay must be >= 0 and eps > 0")
        return self


class AdamW:
    """Adam moments plus ``p -= lr * wd * p`` on matrices and kernels.

    Vectors and scalars (biases, norm gains, the logit scale) are not decayed.
    Parameters whose ``grad`` is ``None`` are skipped entirely, including their
    step count, so unused heads stay untouched.
    """

    def __init__(self, params: Mapping[str, Tensor], config: OptimizerConfig = OptimizerConfig()):
        self.config = config.validate()
        self.params: Dict[str, Tensor] = dict(params)
        self.state: Dict[str, dict] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        b1, b2 = self.config.betas
        wd, eps = self.config.weight_decay, self.config.eps
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            st["t"] += 1
            t = st["t"]
            m, v = st["m"], st["v"]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if wd and p.data.ndim >= 2:
                p.data *= 1.0 - lr * wd
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
