"""Adam optimizer over a list of :class:`Parameter` leaves."""

from __future__ import annotations

from typing import Dict, List

import numpy as np

from .nn import Parameter


class Adam:
    def __init__(self, params: List[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grads_finite(self) -> bool:
        return all(p.grad is None or np.all(np.isfinite(p.grad)) for p in self.params)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0.0:
                continue
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"optim.step": np.array([float(self.step_count)])}
        for p, m, v in zip(self.params, self.m, self.v):
            state[f"optim.m.{p.name}"] = m
            state[f"optim.v.{p.name}"] = v
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.step_count = int(state["optim.step"][0])
        for i, p in enumerate(self.params):
            self.m[i] = np.array(state[f"optim.m.{p.name}"], dtype=p.data.dtype)
            self.v[i] = np.array(state[f"optim.v.{p.name}"], dtype=p.data.dtype)
