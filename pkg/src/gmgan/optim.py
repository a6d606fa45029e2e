"""Adam optimizer over named parameter groups."""

import numpy as np


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) with bias correction.

    frozen_rows maps a parameter name to row indices whose gradient is zeroed
    before each update (used to pin the PAD embedding row at zero). A missing
    gradient counts as zero.
    """

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 frozen_rows=None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.named_params = list(named_params)
        names = [n for n, _ in self.named_params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.frozen_rows = dict(frozen_rows or {})
        self.t = 0
        self.m = {n: np.zeros_like(p.values) for n, p in self.named_params}
        self.v = {n: np.zeros_like(p.values) for n, p in self.named_params}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.values)
            rows = self.frozen_rows.get(name)
            if rows is not None:
                g = g.copy()
                g[rows] = 0.0
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    def state_arrays(self):
        """Named arrays for checkpointing (moments plus the step counter)."""
        out = [("step", np.array([float(self.t)]))]
        for name, _ in self.named_params:
            out.append((name + ".m", self.m[name]))
            out.append((name + ".v", self.v[name]))
        return out

    def load_state_arrays(self, arrays):
        table = dict(arrays)
        self.t = int(table["step"][0])
        for name, p in self.named_params:
            self.m[name] = table[name + ".m"].reshape(p.values.shape).copy()
            self.v[name] = table[name + ".v"].reshape(p.values.shape).copy()
