"""Prompt fusion: weak at the input, strong with predicted bias in deep layers,
and the per-layer adapter that re-derives the attribute matrix from the image.

All fusion attention is single-head at full width D with 1/sqrt(D) scaling.
Weak fusion replaces the prompt (no residual); strong fusion mixes a
query-key attention row with a softmaxed per-key bias prediction, applies the
mixture to the values, and adds the incoming prompt back as a residual.
"""

from __future__ import annotations

import math

from .backbone import (
    AttentionSink,
    TokenSequence,
    assemble_input,
    block_forward,
    key_mask_bias,
    patchify_embed,
)
from .config import RunConfig
from .model import FusionSite, ModelParams
from .tensor import Tensor, matmul, softmax_rows, transpose


def _attend(query: Tensor, keys: Tensor, site: FusionSite):
    """softmax(q(query) k(keys)^T / sqrt(D)) and v(keys); rows of the weights sum to 1."""
    d = keys.shape[1]
    q = matmul(query, site.q)
    k = matmul(keys, site.k)
    v = matmul(keys, site.v)
    weights = softmax_rows(matmul(q, transpose(k)) * (1.0 / math.sqrt(d)))
    return weights, v


def weak_visual_fusion(f_vp0: Tensor, patches: Tensor, site: FusionSite, sink=None) -> Tensor:
    """Input-layer visual prompt enrichment: pure cross-attention readout of the patches."""
    weights, v = _attend(f_vp0, patches, site)
    if sink is not None:
        sink.add("wvpf", weights.data)
    return matmul(weights, v)


def weak_semantic_fusion(f_sp0: Tensor, s0: Tensor, site: FusionSite, sink=None) -> Tensor:
    """Input-layer semantic prompt enrichment over the attribute rows (an unordered set)."""
    weights, v = _attend(f_sp0, s0, site)
    if sink is not None:
        sink.add("wspf", weights.data)
    return matmul(weights, v)


def _strong_fusion(prompt, keys, site, bias_w: Tensor, alpha, sink, label):
    attn, v = _attend(prompt, keys, site)
    bias_logits = transpose(matmul(keys, bias_w))  # one predicted logit per key
    bias = softmax_rows(bias_logits)
    if sink is not None:
        sink.add(f"{label}.attn", attn.data)
        sink.add(f"{label}.bias", bias.data)
    mixture = alpha * attn + (1.0 - alpha) * bias
    return matmul(mixture, v) + prompt


def strong_visual_fusion(f_vp, patches, site, bias_w, alpha_v, sink=None, layer=None) -> Tensor:
    """Deep-layer visual prompt update from patch tokens only (cls/sp excluded).

    Output = [alpha_v * attention + (1-alpha_v) * softmax(per-key bias)] @ v(patches) + f_vp.
    """
    label = "svpf" if layer is None else f"svpf@{layer}"
    return _strong_fusion(f_vp, patches, site, bias_w, alpha_v, sink, label)


def strong_semantic_fusion(f_sp, s_l, site, bias_w, alpha_s, sink=None, layer=None) -> Tensor:
    """Deep-layer semantic prompt update from the adapted attribute matrix."""
    label = "sspf" if layer is None else f"sspf@{layer}"
    return _strong_fusion(f_sp, s_l, site, bias_w, alpha_s, sink, label)


def adapter_update(s_prev: Tensor, patches: Tensor, site: FusionSite, alpha_a,
                   sink=None, layer=None) -> Tensor:
    """Instance-adaptive attribute refresh:
    S_l = alpha_a * softmax(q(S_prev) k(F)^T / sqrt(D)) v(F) + (1 - alpha_a) * S_prev.
    alpha_a = 0 is exactly the identity on S.
    """
    weights, v = _attend(s_prev, patches, site)
    if sink is not None:
        sink.add("adapter" if layer is None else f"adapter@{layer}", weights.data)
    return alpha_a * matmul(weights, v) + (1.0 - alpha_a) * s_prev


def forward_vspcn(image, s0: Tensor, model: ModelParams, cfg: RunConfig,
                  sink: AttentionSink | None = None) -> TokenSequence:
    """Full pipeline for one image.

    Weak fusion runs once on the raw prompts at input assembly. Blocks
    [0, split_layer) are plain; at each deeper layer the adapter refreshes S,
    strong fusion rewrites the prompt rows, then the block runs. Disabled
    prompt tokens stay in the sequence but are masked out of attention keys.
    """
    patches = patchify_embed(image, model.patch_w, model.patch_b, model.pos)

    vp0 = model.vp
    if cfg.wvpf:
        vp0 = weak_visual_fusion(model.vp, patches, model.fusion["wvpf"], sink)
    sp0 = model.sp
    if cfg.wspf:
        sp0 = weak_semantic_fusion(model.sp, s0, model.fusion["wspf"], sink)

    seq = assemble_input(model.cls, vp0, sp0, patches)
    key_bias = key_mask_bias(seq.length, cfg.pv, cfg.ps)

    for i in range(cfg.split_layer):
        seq = block_forward(seq, model.blocks[i], key_bias, sink)

    s_cur = s0
    for i in range(cfg.split_layer, cfg.depth):
        if cfg.adapter:
            s_cur = adapter_update(s_cur, seq.patches, model.fusion["adapter"],
                                   cfg.alpha_a, sink, layer=i)
        vp, sp = seq.vp, seq.sp
        if cfg.svpf:
            vp = strong_visual_fusion(vp, seq.patches, model.fusion["svpf"],
                                      model.bias_v, cfg.alpha_v, sink, layer=i)
        if cfg.sspf:
            sp = strong_semantic_fusion(sp, s_cur, model.fusion["sspf"],
                                        model.bias_s, cfg.alpha_s, sink, layer=i)
        if cfg.svpf or cfg.sspf:
            seq = seq.with_prompts(vp, sp)
        seq = block_forward(seq, model.blocks[i], key_bias, sink)

    return seq
