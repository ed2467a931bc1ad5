"""Adam with bias correction over named parameter dicts.

Uses the efficient formulation from the original paper: the step size is
rescaled by sqrt(1 - beta2^t) / (1 - beta1^t) and epsilon is added to the
uncorrected sqrt(v). With zero gradient the update is exactly zero.
"""

import numpy as np

from .errors import OptimizerError


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.array) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.array) for k, p in self.params.items()}

    def step(self):
        """Apply one update from the accumulated gradients, then clear them."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        alpha = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise OptimizerError(name, "parameter has no gradient")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.array -= alpha * m / (np.sqrt(v) + self.eps)
            p.grad = None
