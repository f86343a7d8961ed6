"""Model parameters: construction, naming, and weight-decay grouping.

Creation order is fixed and single-stream so one seed pins every tensor.
Initialization: projections are fan-in scaled gaussians, biases zero, norm
gains one; prompts, cls, and positional rows use scale 0.02.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BlockParams
from .config import RunConfig
from .tensor import Tensor


@dataclass
class FusionSite:
    q: Tensor
    k: Tensor
    v: Tensor


FUSION_SITES = ("wvpf", "wspf", "svpf", "sspf", "adapter")


class ModelParams:
    """All learnables, addressable by stable dotted names."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        d = cfg.dim
        self._entries = []  # (name, tensor, decay)

        def leaf(name, arr, decay):
            t = Tensor(arr, requires_grad=True)
            self._entries.append((name, t, decay))
            return t

        def proj(name, fan_in, fan_out, decay=True):
            return leaf(name, rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), decay)

        self.cls = leaf("cls", 0.02 * rng.normal(size=(1, d)), False)
        self.vp = leaf("vp", 0.02 * rng.normal(size=(1, d)), False)
        self.sp = leaf("sp", 0.02 * rng.normal(size=(1, d)), False)

        self.patch_w = proj("patch.w", cfg.patch_dim, d)
        self.patch_b = leaf("patch.b", np.zeros((1, d)), False)
        self.pos = leaf("patch.pos", 0.02 * rng.normal(size=(cfg.n_v, d)), True)

        self.blocks = []
        for i in range(cfg.depth):
            p = f"block{i}"
            self.blocks.append(BlockParams(
                heads=cfg.heads,
                wq=proj(f"{p}.attn.wq", d, d),
                bq=leaf(f"{p}.attn.bq", np.zeros((1, d)), False),
                wk=proj(f"{p}.attn.wk", d, d),
                wv=proj(f"{p}.attn.wv", d, d),
                bv=leaf(f"{p}.attn.bv", np.zeros((1, d)), False),
                wo=proj(f"{p}.attn.wo", d, d),
                bo=leaf(f"{p}.attn.bo", np.zeros((1, d)), False),
                ln1_g=leaf(f"{p}.ln1.g", np.ones((1, d)), False),
                ln1_b=leaf(f"{p}.ln1.b", np.zeros((1, d)), False),
                ln2_g=leaf(f"{p}.ln2.g", np.ones((1, d)), False),
                ln2_b=leaf(f"{p}.ln2.b", np.zeros((1, d)), False),
                w1=proj(f"{p}.mlp.w1", d, cfg.mlp_hidden),
                b1=leaf(f"{p}.mlp.b1", np.zeros((1, cfg.mlp_hidden)), False),
                w2=proj(f"{p}.mlp.w2", cfg.mlp_hidden, d),
                b2=leaf(f"{p}.mlp.b2", np.zeros((1, d)), False),
            ))

        self.fusion = {}
        for site in FUSION_SITES:
            self.fusion[site] = FusionSite(
                q=proj(f"fusion.{site}.q", d, d),
                k=proj(f"fusion.{site}.k", d, d),
                v=proj(f"fusion.{site}.v", d, d),
            )

        # bias heads are pure linear maps key -> logit; an intercept would be
        # cancelled by the softmax over keys and never receive gradient
        self.bias_v = proj("bias_v.w", d, 1)
        self.bias_s = proj("bias_s.w", d, 1)

        self.w_d = proj("w_d", cfg.n_attributes, d)
        self.w_c = proj("w_c", d, cfg.n_seen)

    def entries(self):
        """(name, tensor, decay_flag) triples in creation order."""
        return list(self._entries)

    def named(self):
        return [(name, t) for name, t, _ in self._entries]

    def tensor(self, name: str) -> Tensor:
        for n, t, _ in self._entries:
            if n == name:
                return t
        raise KeyError(name)

    def zero_grad(self):
        for _, t, _ in self._entries:
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.size for _, t, _ in self._entries)


def init_model(cfg: RunConfig, seed=None) -> ModelParams:
    """Build parameters from a dedicated stream; default derives from cfg.seed."""
    if seed is None:
        seed = [cfg.seed, 1]
    return ModelParams(cfg, np.random.default_rng(seed))
