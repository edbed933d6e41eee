"""Adam optimizer over a :class:`~canet.params.NetworkParams` table."""

from __future__ import annotations

import math

import numpy as np

from .params import NetworkParams


class OptimState:
    """First/second moment buffers plus the hyper-parameters of one Adam instance."""

    def __init__(self, params: NetworkParams, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.params.items()}


class Adam:
    def __init__(self, params: NetworkParams, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = OptimState(params, lr, betas, eps)

    def zero_grad(self) -> None:
        for t in self.params.params.values():
            t.grad = None

    def step(self) -> None:
        """Apply one bias-corrected update to every parameter that received a gradient.

        Parameters whose ``grad`` is None are skipped entirely.  A non-finite
        gradient aborts before anything is modified.
        """
        items = [(n, t) for n, t in self.params.params.items() if t.grad is not None]
        for name, t in items:
            if t.grad.shape != t.data.shape:
                raise ValueError(f"gradient for {name} has shape {t.grad.shape}, expected {t.shape}")
            if not np.all(np.isfinite(t.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
        st = self.state
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        step_size = st.lr / c1
        root_c2 = math.sqrt(c2)
        for name, t in items:
            g = t.grad
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            t.data -= step_size * m / (np.sqrt(v) / root_c2 + st.eps)

