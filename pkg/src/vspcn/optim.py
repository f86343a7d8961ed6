"""First-order adaptive-moment optimizer with decoupled weight decay.

Decay applies only to entries registered with decay=True (projection and
embedding matrices); norms, biases, prompts, and the cls token always take
pure gradient steps. Parameters whose gradient is absent in a step are
skipped entirely, decay included, so a loss component that was pruned from
the graph cannot move its parameters.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError


class Adam:
    def __init__(self, entries, lr: float = 1e-3, weight_decay: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.entries = list(entries)  # (name, tensor, decay) triples
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t, _ in self.entries}
        self.v = {name: np.zeros_like(t.data) for name, t, _ in self.entries}

    def zero_grad(self) -> None:
        for _, t, _ in self.entries:
            t.grad = None

    def step(self) -> None:
        """Apply one update; all-or-nothing so an abort leaves parameters intact."""
        next_count = self.step_count + 1
        bc1 = 1.0 - self.beta1 ** next_count
        bc2 = 1.0 - self.beta2 ** next_count
        staged = []
        # isfinite below is the real guard; numpy's own overflow warnings are noise
        with np.errstate(over="ignore", invalid="ignore"):
            for name, t, decay in self.entries:
                g = t.grad
                if g is None:
                    continue
                m = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
                v = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
                update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if decay and self.weight_decay != 0.0:
                    update = update + self.lr * self.weight_decay * t.data
                new = t.data - update
                if not np.isfinite(new).all():
                    raise NumericError(f"non-finite update for parameter {name}")
                staged.append((name, t, m, v, new))
        for name, t, m, v, new in staged:
            self.m[name] = m
            self.v[name] = v
            t.data = new
        self.step_count = next_count

    def state_arrays(self) -> dict:
        """Flat named arrays for checkpointing, in registration order."""
        out = {}
        for name, _, _ in self.entries:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int) -> None:
        for name, t, _ in self.entries:
            for prefix, store in (("opt.m.", self.m), ("opt.v.", self.v)):
                arr = arrays[prefix + name]
                if arr.shape != t.data.shape:
                    raise ValueError(
                        f"optimizer state {prefix + name}: expected shape "
                        f"{t.data.shape}, found {arr.shape}"
                    )
                store[name] = arr.astype(np.float64, copy=True)
        self.step_count = int(step_count)
