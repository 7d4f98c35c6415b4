"""Adam with linear warmup followed by inverse-sqrt decay."""

from __future__ import annotations

import numpy as np


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    warmup_steps = max(1, warmup_steps)
    if step <= warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * np.sqrt(warmup_steps / step)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-9,
                 warmup_steps=1):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        lr = lr_at(self.t, self.lr, self.warmup_steps)
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    # -- resume support ----------------------------------------------------

    def state_buffers(self):
        out = {"opt_t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"opt_m_{i:04d}"] = m
            out[f"opt_v_{i:04d}"] = v
        return out

    def load_state_buffers(self, buffers):
        self.t = int(buffers["opt_t"][0])
        for i in range(len(self.params)):
            self.m[i] = buffers[f"opt_m_{i:04d}"].reshape(self.m[i].shape).copy()
            self.v[i] = buffers[f"opt_v_{i:04d}"].reshape(self.v[i].shape).copy()
