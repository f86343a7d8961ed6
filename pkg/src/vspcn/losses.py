"""Training objective: prototype classification, attribute regression, the
divergence regularizer on the visual prompt, and semantic distillation.

Conventions fixed here: ||.||^2 terms are sums of squared differences (not
means); the divergence KL runs over softmaxed raw D-dim tokens by default,
with a switch for classifier logits; the KL denominator is floored at eps_kl
because it is exactly zero whenever the two tokens coincide.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import RunConfig
from .tensor import (
    Tensor,
    entry,
    exp,
    log,
    log_softmax_rows,
    matmul,
    maximum,
    narrow,
    sum_all,
    transpose,
)


@dataclass
class LossWeights:
    gamma: float = 1.0        # attribute-regression weight inside the base loss
    eta1: float = 1.0         # prompt cross-entropy weight inside the divergence loss
    eta2: float = 1.0         # entropy-divergence weight inside the divergence loss
    lambda_ced: float = 0.8   # outer weight of the divergence loss
    lambda_skd: float = 0.9   # outer weight of the distillation loss
    eps_kl: float = 1e-8

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "LossWeights":
        return cls(gamma=cfg.gamma, eta1=cfg.eta1, eta2=cfg.eta2,
                   lambda_ced=cfg.lambda_ced, lambda_skd=cfg.lambda_skd,
                   eps_kl=cfg.eps_kl)

    def check(self) -> "LossWeights":
        for name in ("gamma", "eta1", "eta2", "lambda_ced", "lambda_skd", "eps_kl"):
            v = getattr(self, name)
            if not (v >= 0.0) or v != v or v == float("inf"):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")
        return self


def _check_label(y: int, n: int):
    if not 0 <= y < n:
        raise ValueError(f"label {y} out of range for {n} classes")


def cross_entropy_row(logits: Tensor, y: int) -> Tensor:
    """-log softmax(logits)[y] for a single (1, n) logit row."""
    _check_label(y, logits.shape[1])
    return -entry(log_softmax_rows(logits), 0, y)


def kl_rows(a: Tensor, b: Tensor) -> Tensor:
    """KL(softmax(a) || softmax(b)) summed over one (1, n) row each."""
    la = log_softmax_rows(a)
    lb = log_softmax_rows(b)
    return sum_all(exp(la) * (la - lb))


def symmetric_kl(a: Tensor, b: Tensor) -> Tensor:
    """(KL(a||b) + KL(b||a)) / 2 over softmaxed rows; symmetric by construction."""
    return 0.5 * kl_rows(a, b) + 0.5 * kl_rows(b, a)


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    return sum_all(diff * diff)


def entropy_divergence(ce_total: Tensor, kl: Tensor, eps_kl: float) -> Tensor:
    """log(ce_total / max(kl, eps) + 1): strictly decreasing in kl at fixed ce."""
    return log(ce_total / maximum(kl, Tensor(eps_kl)) + 1.0)


def loss_cls(f_cls: Tensor, prototypes: Tensor, y: int) -> Tensor:
    """Cross entropy of the cls token scored against the seen-class prototypes."""
    _check_label(y, prototypes.shape[0])
    logits = matmul(f_cls, transpose(prototypes))
    return cross_entropy_row(logits, y)


def loss_ar(f_cls: Tensor, proto_gt: Tensor) -> Tensor:
    """Squared distance pulling the cls token onto its class prototype."""
    return squared_distance(f_cls, proto_gt)


def loss_ced(f_vp: Tensor, f_cls: Tensor, w_c: Tensor, y: int,
             eta1: float, eta2: float, eps_kl: float,
             kl_on_logits: bool = False) -> Tensor:
    """Divergence regularizer on the visual prompt.

    eta1 * CE(f_vp @ W_c, y)
    + eta2 * log((CE(f_vp @ W_c, y) + CE(f_cls @ W_c, y)) / max(KL, eps) + 1)
    where KL compares softmax(f_vp) with softmax(f_cls) over raw tokens, or
    over the classifier logits when kl_on_logits is set. With both etas zero
    the term is identically zero and contributes no graph.
    """
    if eta1 == 0.0 and eta2 == 0.0:
        return Tensor(0.0)
    vp_logits = matmul(f_vp, w_c)
    cls_logits = matmul(f_cls, w_c)
    _check_label(y, vp_logits.shape[1])
    ce_vp = cross_entropy_row(vp_logits, y)
    out = eta1 * ce_vp
    if eta2 != 0.0:
        ce_cls = cross_entropy_row(cls_logits, y)
        if kl_on_logits:
            kl = kl_rows(vp_logits, cls_logits)
        else:
            kl = kl_rows(f_vp, f_cls)
        out = out + eta2 * entropy_divergence(ce_vp + ce_cls, kl, eps_kl)
    return out


def loss_skd(f_sp: Tensor, proto_y: Tensor, proto_gt: Tensor) -> Tensor:
    """Semantic distillation: symmetric KL to the class prototype plus squared pull.

    proto_y and proto_gt are the same row during training; both parameters are
    kept so the two roles stay visible.
    """
    return symmetric_kl(f_sp, proto_y) + squared_distance(proto_gt, f_sp)


def narrow_row(matrix: Tensor, i: int) -> Tensor:
    _check_label(i, matrix.shape[0])
    return narrow(matrix, 0, i, 1)


def loss_total(f_cls: Tensor, f_vp: Tensor, f_sp: Tensor,
               prototypes_seen: Tensor, y: int, w_c: Tensor,
               weights: LossWeights, kl_on_logits: bool = False,
               include_ced: bool = True, include_skd: bool = True):
    """Weighted sum of the components; returns (total, breakdown dict).

    A component with outer weight exactly 0, or toggled off, is skipped
    entirely (not just scaled), so its parameters receive no gradient.
    Breakdown entries for skipped components are 0.0.
    """
    proto_gt = narrow_row(prototypes_seen, y)
    total = loss_cls(f_cls, prototypes_seen, y)
    parts = {"loss_cls": total.item(), "loss_ar": 0.0, "loss_ced": 0.0, "loss_skd": 0.0}

    if weights.gamma != 0.0:
        ar = loss_ar(f_cls, proto_gt)
        parts["loss_ar"] = ar.item()
        total = total + weights.gamma * ar
    if include_ced and weights.lambda_ced != 0.0:
        ced = loss_ced(f_vp, f_cls, w_c, y, weights.eta1, weights.eta2,
                       weights.eps_kl, kl_on_logits)
        parts["loss_ced"] = ced.item()
        total = total + weights.lambda_ced * ced
    if include_skd and weights.lambda_skd != 0.0:
        skd = loss_skd(f_sp, proto_gt, proto_gt)
        parts["loss_skd"] = skd.item()
        total = total + weights.lambda_skd * skd

    parts["total"] = total.item()
    return total, parts
