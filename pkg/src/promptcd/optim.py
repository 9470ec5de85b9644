"""First-order optimizer used for training."""

import numpy as np


class Adam:
    """Adam with the conventional defaults (b1=0.9, b2=0.999, eps=1e-8).

    Frozen parameters are skipped entirely; parameters with no gradient
    this step are left untouched.
    """

    def __init__(self, params, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1 = b1
        self.b2 = b2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self):
        self.t += 1
        b1, b2 = self.b1, self.b2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p in self.params:
            if p.frozen or p.tensor.grad is None:
                continue
            g = p.tensor.grad
            key = id(p)
            m = self._m.get(key)
            if m is None:
                m = self._m[key] = np.zeros_like(p.tensor.data)
                self._v[key] = np.zeros_like(p.tensor.data)
            v = self._v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bias1
            v_hat = v / bias2
            p.tensor.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.tensor.data.dtype)

    def zero_grads(self):
        for p in self.params:
            p.tensor.grad = None
