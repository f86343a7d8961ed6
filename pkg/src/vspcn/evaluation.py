"""Calibrated seen/unseen inference and the CZSL/GZSL metric suite.

Scores are cls-token dot products against embedded prototypes for every
class; calibration adds tau to unseen-class scores before the argmax. The
unseen-restricted accuracy (CZSL), seen/unseen accuracies under the full
label space (S, U), and their harmonic mean H are reported in percent,
averaged per class by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import GzslDataset, embed_prototypes
from .errors import ConfigError, ShapeError
from .fusion import forward_vspcn
from .model import ModelParams
from .tensor import Tensor, no_grad


def harmonic_mean(s: float, u: float) -> float:
    """2SU/(S+U), or 0 when the sum vanishes."""
    if s + u <= 0.0:
        return 0.0
    return 2.0 * s * u / (s + u)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def calibrated_predict(f_cls, prototypes, unseen_mask, tau: float) -> int:
    """argmax over classes of f_cls . prototype + tau * [class unseen].

    Ties resolve to the lowest class index, so predictions are deterministic.
    """
    protos = _as_array(prototypes)
    if protos.ndim != 2 or protos.shape[0] < 1:
        raise ShapeError(f"need a non-empty prototype matrix, got shape {protos.shape}")
    feats = _as_array(f_cls).reshape(-1)
    if feats.shape[0] != protos.shape[1]:
        raise ShapeError(
            f"feature width {feats.shape[0]} does not match prototypes {protos.shape}"
        )
    scores = protos @ feats + tau * np.asarray(unseen_mask, dtype=np.float64)
    return int(np.argmax(scores))


@dataclass
class EvalReport:
    tau: float
    acc_czsl: float  # unseen accuracy with the label space restricted to unseen
    u: float         # unseen accuracy over the full label space
    s: float         # seen accuracy over the full label space
    h: float
    gzsl_counts: dict = field(default_factory=dict)  # label -> (correct, total)
    czsl_counts: dict = field(default_factory=dict)

    CSV_HEADER = "tau,acc_czsl,u,s,h"

    def csv_row(self) -> str:
        return ",".join(repr(float(v)) for v in (self.tau, self.acc_czsl, self.u, self.s, self.h))

    def to_text(self) -> str:
        return (
            f"tau           {self.tau}\n"
            f"CZSL accuracy {self.acc_czsl:.2f}%\n"
            f"U (unseen)    {self.u:.2f}%\n"
            f"S (seen)      {self.s:.2f}%\n"
            f"H             {self.h:.2f}%\n"
        )


def _accuracy(preds: np.ndarray, labels: np.ndarray, classes, macro: bool):
    counts = {}
    for c in classes:
        sel = labels == c
        if sel.any():
            counts[int(c)] = (int((preds[sel] == c).sum()), int(sel.sum()))
    if not counts:
        return 0.0, counts
    if macro:
        acc = float(np.mean([c / t for c, t in counts.values()]))
    else:
        correct = sum(c for c, _ in counts.values())
        total = sum(t for _, t in counts.values())
        acc = correct / total
    return 100.0 * acc, counts


def class_scores(model: ModelParams, cfg: RunConfig, dataset: GzslDataset,
                 images: np.ndarray) -> np.ndarray:
    """(n_images, n_classes) matrix of cls-token scores, computed value-only."""
    with no_grad():
        protos = embed_prototypes(dataset.class_attributes, model.w_d).data
        s0 = Tensor(dataset.word_vectors)
        rows = []
        for img in images:
            seq = forward_vspcn(img, s0, model, cfg)
            rows.append(protos @ seq.cls.data.reshape(-1))
    return np.array(rows)


def report_from_scores(scores: np.ndarray, labels: np.ndarray, n_seen: int,
                       n_classes: int, tau: float, macro: bool = True) -> EvalReport:
    """All metrics for one tau from a precomputed score matrix (tau-free)."""
    unseen = np.arange(n_classes) >= n_seen
    if not unseen.any():
        raise ConfigError("evaluation needs at least one unseen class")
    is_unseen_sample = labels >= n_seen

    calibrated = scores + tau * unseen[None, :]
    preds = np.argmax(calibrated, axis=1)

    s_acc, s_counts = _accuracy(preds[~is_unseen_sample], labels[~is_unseen_sample],
                                range(n_seen), macro)
    u_acc, u_counts = _accuracy(preds[is_unseen_sample], labels[is_unseen_sample],
                                range(n_seen, n_classes), macro)

    # CZSL: restrict candidates to unseen classes, no calibration needed
    unseen_scores = scores[is_unseen_sample][:, n_seen:]
    czsl_preds = np.argmax(unseen_scores, axis=1) + n_seen
    czsl_acc, czsl_counts = _accuracy(czsl_preds, labels[is_unseen_sample],
                                      range(n_seen, n_classes), macro)

    counts = dict(s_counts)
    counts.update(u_counts)
    return EvalReport(
        tau=float(tau),
        acc_czsl=czsl_acc,
        u=u_acc,
        s=s_acc,
        h=harmonic_mean(s_acc, u_acc),
        gzsl_counts=counts,
        czsl_counts=czsl_counts,
    )


def evaluate(model: ModelParams, cfg: RunConfig, dataset: GzslDataset,
             tau: float | None = None) -> EvalReport:
    """Run the test split through the model and score at one tau."""
    if dataset.test_labels.size == 0:
        raise ConfigError("dataset has an empty test split")
    scores = class_scores(model, cfg, dataset, dataset.test_images)
    return report_from_scores(scores, dataset.test_labels, dataset.n_seen,
                              dataset.n_classes, cfg.tau if tau is None else tau,
                              cfg.macro_average)


def sweep_tau(model: ModelParams, cfg: RunConfig, dataset: GzslDataset,
              grid=None):
    """One report per grid point plus the tau maximizing H (first on ties).

    The forward passes are tau-independent, so scores are computed once.
    """
    if grid is None:
        grid = np.linspace(cfg.tau_min, cfg.tau_max, cfg.tau_steps)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ConfigError("tau sweep needs a non-empty grid")
    if dataset.test_labels.size == 0:
        raise ConfigError("dataset has an empty test split")
    scores = class_scores(model, cfg, dataset, dataset.test_images)
    reports = [
        report_from_scores(scores, dataset.test_labels, dataset.n_seen,
                           dataset.n_classes, t, cfg.macro_average)
        for t in grid
    ]
    best = max(reports, key=lambda r: r.h)
    return reports, best.tau


def write_sweep_csv(reports, path) -> None:
    lines = ["tau,h"] + [f"{repr(r.tau)},{repr(r.h)}" for r in reports]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def render_sweep_svg(reports, path) -> None:
    """Line plot of H against tau; import is local so the CLI stays light."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    taus = [r.tau for r in reports]
    hs = [r.h for r in reports]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(taus, hs, marker="o", markersize=3)
    best = max(reports, key=lambda r: r.h)
    ax.axvline(best.tau, linestyle="--", linewidth=0.8, color="gray")
    ax.set_xlabel("tau")
    ax.set_ylabel("H (%)")
    ax.set_title("calibration sweep")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
