"""Adam optimizer with bias-corrected moment estimates."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contained nan/inf; the step was not applied."""


class Adam:
    """Holds per-parameter first/second moment buffers and the step count.

    ``params`` maps names to Tensors; names appear in diagnostics.  One
    driver owns the optimizer; steps are not safe to run concurrently.
    """

    def __init__(self, params: dict[str, Tensor], lr=0.005, beta1=0.9,
                 beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        # validate every gradient before touching any state so a bad step
        # leaves parameters, moments and t untouched
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(
                    f"non-finite gradient for parameter '{name}' at step {self.t + 1}"
                )
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
