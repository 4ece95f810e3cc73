"""Plain Adam with coupled weight decay plus a linear warmup/decay schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam over a name -> Tensor parameter dict.

    Weight decay is coupled (added to the gradient) rather than decoupled;
    decay is skipped for parameters whose name marks them as a norm scale,
    norm bias, or plain bias.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 5e-4,
        beta1: float = 0.9,
        beta2: float = 0.98,
        eps: float = 1e-6,
        weight_decay: float = 1e-5,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    @staticmethod
    def _decays(name: str) -> bool:
        return not (name.endswith(".bias") or ".norm." in name or name.endswith(".scale"))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        """One update from the accumulated ``grad`` buffers (missing = skip)."""
        self.step_count += 1
        t = self.step_count
        lr = self.lr if lr is None else lr
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and self._decays(name):
                g = g + self.weight_decay * p.data
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - (lr * update).astype(p.data.dtype, copy=False)


def linear_schedule(step: int, total_steps: int, warmup_ratio: float = 0.06) -> float:
    """Peak-relative learning-rate factor: linear warmup then linear decay."""
    warmup = max(1, int(total_steps * warmup_ratio))
    if step < warmup:
        return (step + 1) / warmup
    remaining = max(1, total_steps - warmup)
    return max(0.0, (total_steps - step) / remaining)
