from __future__ import annotations

import numpy as np

from .layers import Parameter


def adam_step(param: Parameter, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam update; clears ``param.grad`` afterwards."""
    t = param.step_count + 1
    g = param.grad
    param.adam_m *= beta1
    param.adam_m += (1 - beta1) * g
    param.adam_v *= beta2
    param.adam_v += (1 - beta2) * g * g
    m_hat = param.adam_m / (1 - beta1 ** t)
    v_hat = param.adam_v / (1 - beta2 ** t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    param.value -= update.astype(param.value.dtype)
    param.step_count = t
    param.zero_grad()


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self):
        for p in self.params:
            adam_step(p, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
