import numpy as np

from ..errors import ShapeError, ValidationError


class Adam:
    """Adam with bias-corrected moment estimates.

    ``m``/``v`` mirror the parameter dict by name and are created lazily on
    the first step; ``t`` counts completed steps.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ValidationError(f"learning rate must be >= 0, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValidationError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads):
        for k, p in params.items():
            g = grads.get(k)
            if g is None or g.shape != p.shape:
                raise ShapeError(f"gradient for {k!r} has shape {None if g is None else g.shape}, parameter {p.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.lr:
                p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        out = {f"adam_m:{k}": v for k, v in self.m.items()}
        out.update({f"adam_v:{k}": v for k, v in self.v.items()})
        return out


def adam_step(params, grads, opt: Adam) -> Adam:
    """Functional spelling of ``opt.step``; parameters are updated in place."""
    opt.step(params, grads)
    return opt
