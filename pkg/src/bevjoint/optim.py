"""AdamW with decoupled weight decay and global-norm gradient clipping."""

import numpy as np

from .tensor import ConfigurationError


def clip_global_norm(params, max_norm):
    """Scale all gradients by the same factor so the global L2 norm is at most
    `max_norm`; never changes gradient direction. Returns the pre-clip norm."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.vdot(p.grad, p.grad).real)
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.tensor.grad = p.grad * p.grad.dtype.type(factor)
    return norm


class AdamW:
    """Decoupled weight decay Adam over a fixed parameter list."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = [p for p in params if p.trainable]
        ids = [p.id for p in self.params]
        if len(ids) != len(set(ids)):
            raise ConfigurationError("duplicate parameter ids in optimizer")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.id: np.zeros_like(p.data) for p in self.params}
        self.v = {p.id: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[p.id]
            v = self.v[p.id]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = p.data - self.lr * (update + self.weight_decay * p.data)
            p.tensor.data = new.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
