import numpy as np

from .tensor import Param, ShapeError


class AdamState:
    """First/second moment buffers plus the step counter."""

    def __init__(self, params: list[Param]):
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0


def adam_step(params: list[Param], state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(state.m):
        raise ShapeError("optimizer state does not match parameter list")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.value.shape:
            raise ShapeError(f"state shape {m.shape} != parameter shape {p.value.shape}")
        g = p.grad
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.value -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.value.dtype)


class Adam:
    def __init__(self, params: list[Param], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState(self.params)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)
