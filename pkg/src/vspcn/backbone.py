"""Token sequence, patch embedding, and pre-norm transformer blocks.

The sequence layout is fixed at [cls, vp, sp, patch_1..patch_Nv], length
N_v + 3 at every layer. Disabled prompt tokens are not removed; they are
masked out of every attention key set with a finite -1e9 additive bias so
their softmax weight underflows to exactly zero (keeps all kernels finite
and makes masking provably equivalent to removing the token).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    concat,
    gelu,
    layer_norm_rows,
    matmul,
    narrow,
    softmax_rows,
    transpose,
)

KEY_MASK_BIAS = -1e9  # finite; exp underflows to 0.0 without tripping NaN checks


class AttentionSink:
    """Collects (site, weight-matrix) pairs from a forward pass for export/tests."""

    def __init__(self):
        self.records = []

    def add(self, site: str, weights: np.ndarray) -> None:
        self.records.append((site, np.array(weights, copy=True)))


@dataclass
class TokenSequence:
    """tokens: (N_v + 3, D) in the canonical order; layer_index counts blocks applied."""

    tokens: Tensor
    layer_index: int = 0

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 4:
            raise ShapeError(
                f"token sequence needs at least 4 rows (cls, vp, sp, >=1 patch), got {self.tokens.shape}"
            )

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_patches(self) -> int:
        return self.length - 3

    @property
    def cls(self) -> Tensor:
        return narrow(self.tokens, 0, 0, 1)

    @property
    def vp(self) -> Tensor:
        return narrow(self.tokens, 0, 1, 1)

    @property
    def sp(self) -> Tensor:
        return narrow(self.tokens, 0, 2, 1)

    @property
    def patches(self) -> Tensor:
        return narrow(self.tokens, 0, 3, self.n_patches)

    def with_prompts(self, vp: Tensor, sp: Tensor) -> "TokenSequence":
        """Same sequence with the prompt rows replaced (layer index unchanged)."""
        return TokenSequence(
            concat([self.cls, vp, sp, self.patches], axis=0), self.layer_index
        )


@dataclass
class BlockParams:
    """One pre-norm encoder block: multi-head attention + GELU MLP.

    The key projection carries no bias: a shared key offset shifts every
    score in a row equally, so softmax cancels it and its gradient would be
    identically zero. Queries and values keep theirs.
    """

    heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def ln_affine(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    """Row layer norm followed by the learned per-feature scale and shift."""
    return layer_norm_rows(x) * g + b


def patchify_embed(image, patch_w: Tensor, patch_b: Tensor, pos: Tensor) -> Tensor:
    """Map an (N_v, patch_dim) patch grid to (N_v, D) tokens.

    Same learned linear map per patch, then the per-position embedding is
    added. Prompts and cls never pass through here: they carry no position.
    """
    img = image if isinstance(image, Tensor) else Tensor(image)
    if img.ndim != 2:
        raise ShapeError(f"image must be a 2-D patch grid, got shape {img.shape}")
    if img.shape[1] != patch_w.shape[0]:
        raise ShapeError(
            f"patch width mismatch: image {img.shape}, embedder {patch_w.shape}"
        )
    if img.shape[0] != pos.shape[0]:
        raise ShapeError(
            f"patch count mismatch: image has {img.shape[0]} patches, "
            f"positional table has {pos.shape[0]}"
        )
    return matmul(img, patch_w) + patch_b + pos


def assemble_input(cls: Tensor, vp: Tensor, sp: Tensor, patches: Tensor) -> TokenSequence:
    """Stack [cls, vp, sp, patches] into the layer-0 sequence."""
    if patches.ndim != 2 or patches.shape[0] < 1:
        raise ConfigError(f"need at least one patch token, got shape {patches.shape}")
    d = patches.shape[1]
    for name, t in (("cls", cls), ("vp", vp), ("sp", sp)):
        if t.shape != (1, d):
            raise ShapeError(f"{name} must have shape (1, {d}), got {t.shape}")
    return TokenSequence(concat([cls, vp, sp, patches], axis=0), layer_index=0)


def key_mask_bias(n_tokens: int, pv: bool, ps: bool):
    """(1, n_tokens) additive bias hiding disabled prompt rows from all queries."""
    if pv and ps:
        return None
    bias = np.zeros((1, n_tokens))
    if not pv:
        bias[0, 1] = KEY_MASK_BIAS
    if not ps:
        bias[0, 2] = KEY_MASK_BIAS
    return Tensor(bias)


def block_forward(seq: TokenSequence, bp: BlockParams, key_bias=None, sink=None) -> TokenSequence:
    """x + MHA(LN(x)), then + MLP(LN(.)). Scores scale by 1/sqrt(head_dim)."""
    x = seq.tokens
    t, d = x.shape
    if d % bp.heads != 0:
        raise ShapeError(f"heads ({bp.heads}) must divide token width ({d})")
    dh = d // bp.heads
    scale = 1.0 / math.sqrt(dh)

    h = ln_affine(x, bp.ln1_g, bp.ln1_b)
    q = matmul(h, bp.wq) + bp.bq
    k = matmul(h, bp.wk)
    v = matmul(h, bp.wv) + bp.bv

    contexts = []
    for i in range(bp.heads):
        qi = narrow(q, 1, i * dh, dh)
        ki = narrow(k, 1, i * dh, dh)
        vi = narrow(v, 1, i * dh, dh)
        scores = matmul(qi, transpose(ki)) * scale
        if key_bias is not None:
            scores = scores + key_bias
        attn = softmax_rows(scores)
        if sink is not None:
            sink.add(f"block{seq.layer_index}.head{i}", attn.data)
        contexts.append(matmul(attn, vi))

    x = x + (matmul(concat(contexts, axis=1), bp.wo) + bp.bo)
    h2 = ln_affine(x, bp.ln2_g, bp.ln2_b)
    mlp = matmul(gelu(matmul(h2, bp.w1) + bp.b1), bp.w2) + bp.b2
    return TokenSequence(x + mlp, seq.layer_index + 1)
