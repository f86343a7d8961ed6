"""Training loop, checkpoint persistence, and the toggle-ablation harness.

Training is single-threaded and deterministic: data synthesis, parameter
init, and batch shuffling each draw from their own seed-derived stream, and
log floats are written with repr, so identical seeds give byte-identical
logs. Only seen-class images are ever trained on.

.vspc checkpoint layout (little-endian):
    magic "VSPC" | version u16 | config u32 length + utf-8 canonical text
    epoch u32 | optimizer step u64 | tensor count u32
    per tensor: name u16 length + utf-8, ndim u16, extents u32 each, f64 data
Tensors appear in registration order: model parameters, then optimizer
moment arrays. Save -> load -> save round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_text
from .data import GzslDataset, embed_prototypes, load_dataset, synth_gzsl_dataset
from .errors import CheckpointError, ConfigError, NumericError, TrainingAbort
from .evaluation import class_scores, report_from_scores, sweep_tau
from .fusion import forward_vspcn
from .losses import LossWeights, loss_total
from .model import ModelParams, init_model
from .optim import Adam
from .tensor import Tensor, backward, no_grad

_MAGIC = b"VSPC"
_VERSION = 1

LOG_HEADER = "step,loss_cls,loss_ar,loss_ced,loss_skd,total"

# The eight toggle rows of the component-ablation table, in presentation
# order: baseline; each prompt alone with its own fusion path; both prompts
# bare; weak-only; strong-only; everything with and without the adapter.
ABLATION_ROWS = (
    dict(pv=False, ps=False, wvpf=False, wspf=False, svpf=False, sspf=False, adapter=False),
    dict(pv=True, ps=False, wvpf=True, wspf=False, svpf=True, sspf=False, adapter=False),
    dict(pv=False, ps=True, wvpf=False, wspf=True, svpf=False, sspf=True, adapter=True),
    dict(pv=True, ps=True, wvpf=False, wspf=False, svpf=False, sspf=False, adapter=False),
    dict(pv=True, ps=True, wvpf=True, wspf=True, svpf=False, sspf=False, adapter=False),
    dict(pv=True, ps=True, wvpf=False, wspf=False, svpf=True, sspf=True, adapter=True),
    dict(pv=True, ps=True, wvpf=True, wspf=True, svpf=True, sspf=True, adapter=False),
    dict(pv=True, ps=True, wvpf=True, wspf=True, svpf=True, sspf=True, adapter=True),
)

ABLATION_HEADER = "pv,ps,wvpf,wspf,svpf,sspf,adapter,tau,u,s,h"


def resolve_dataset(cfg: RunConfig, dataset: GzslDataset | None = None) -> GzslDataset:
    if dataset is not None:
        ds = dataset
    elif cfg.data_path:
        ds = load_dataset(cfg.data_path)
    else:
        ds = synth_gzsl_dataset(cfg, cfg.seed)
    if ds.word_vectors.shape != (cfg.n_attributes, cfg.dim):
        raise ConfigError(
            f"dataset word vectors {ds.word_vectors.shape} do not match config "
            f"(n_attributes={cfg.n_attributes}, dim={cfg.dim})"
        )
    if ds.n_seen != cfg.n_seen or ds.n_unseen != cfg.n_unseen:
        raise ConfigError(
            f"dataset split ({ds.n_seen} seen / {ds.n_unseen} unseen) does not match "
            f"config ({cfg.n_seen} / {cfg.n_unseen})"
        )
    if ds.train_images.shape[1:] != (cfg.n_v, cfg.patch_dim):
        raise ConfigError(
            f"dataset patch grid {ds.train_images.shape[1:]} does not match config "
            f"(n_v={cfg.n_v}, patch_dim={cfg.patch_dim})"
        )
    return ds


@dataclass
class TrainResult:
    model: ModelParams
    optimizer: Adam
    dataset: GzslDataset
    log_lines: list
    epochs_run: int

    def log_text(self) -> str:
        return "\n".join(self.log_lines) + "\n"


def train(cfg: RunConfig, dataset: GzslDataset | None = None,
          out_dir=None) -> TrainResult:
    """Optimize on the seen-class train split for cfg.epochs.

    If out_dir is given, writes train_log.csv and checkpoint.vspc there. A
    non-finite loss or update aborts with the last-good parameters
    checkpointed (parameters only mutate after a fully finite step).
    """
    cfg.validated()
    ds = resolve_dataset(cfg, dataset)
    model = init_model(cfg)
    opt = Adam(model.entries(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    weights = LossWeights.from_config(cfg).check()
    shuffle_rng = np.random.default_rng([cfg.seed, 2])

    include_ced = cfg.pv
    include_skd = cfg.ps
    attrs_seen = Tensor(ds.class_attributes[: cfg.n_seen])
    s0 = Tensor(ds.word_vectors)
    n_train = ds.train_labels.shape[0]

    log_lines = [LOG_HEADER]
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    def flush_files(epoch: int):
        if out_path is None:
            return None
        (out_path / "train_log.csv").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
        ck = out_path / "checkpoint.vspc"
        checkpoint_save(ck, model, cfg, opt, epoch)
        return ck

    step = 0
    epoch = 0
    try:
        # the per-op finiteness checks are the real guard; numpy's own
        # overflow warnings on a diverging run are noise above the abort
        with np.errstate(over="ignore", invalid="ignore"):
            for epoch in range(cfg.epochs):
                order = shuffle_rng.permutation(n_train)
                for start in range(0, n_train, cfg.batch_size):
                    batch = order[start:start + cfg.batch_size]
                    opt.zero_grad()
                    protos = embed_prototypes(attrs_seen, model.w_d)
                    acc = None
                    sums = {"loss_cls": 0.0, "loss_ar": 0.0, "loss_ced": 0.0,
                            "loss_skd": 0.0, "total": 0.0}
                    for idx in batch:
                        seq = forward_vspcn(ds.train_images[idx], s0, model, cfg)
                        sample_loss, parts = loss_total(
                            seq.cls, seq.vp, seq.sp, protos, int(ds.train_labels[idx]),
                            model.w_c, weights, cfg.kl_on_logits,
                            include_ced=include_ced, include_skd=include_skd,
                        )
                        acc = sample_loss if acc is None else acc + sample_loss
                        for key in sums:
                            sums[key] += parts[key]
                    scale = 1.0 / len(batch)
                    backward(acc * scale)
                    opt.step()
                    step += 1
                    log_lines.append(",".join(
                        [str(step)] + [repr(sums[k] * scale) for k in
                                       ("loss_cls", "loss_ar", "loss_ced", "loss_skd", "total")]
                    ))
    except NumericError as e:
        ck = flush_files(epoch)
        raise TrainingAbort(
            f"training aborted at step {step + 1}: {e}", checkpoint_path=ck
        ) from e

    flush_files(cfg.epochs)
    return TrainResult(model=model, optimizer=opt, dataset=ds,
                       log_lines=log_lines, epochs_run=cfg.epochs)


def seen_train_accuracy(model: ModelParams, cfg: RunConfig, ds: GzslDataset) -> float:
    """Plain top-1 sample accuracy on the train split over seen prototypes."""
    with no_grad():
        protos = embed_prototypes(ds.class_attributes[: ds.n_seen], model.w_d).data
        s0 = Tensor(ds.word_vectors)
        correct = 0
        for img, label in zip(ds.train_images, ds.train_labels):
            seq = forward_vspcn(img, s0, model, cfg)
            pred = int(np.argmax(protos @ seq.cls.data.reshape(-1)))
            correct += int(pred == int(label))
    return correct / len(ds.train_labels)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    version: int
    config_text: str
    cfg: RunConfig
    epoch: int
    step_count: int
    tensors: dict  # name -> float64 ndarray, model params then optimizer state


def checkpoint_save(path, model: ModelParams, cfg: RunConfig, opt: Adam | None,
                    epoch: int) -> None:
    named = {name: t.data for name, t, _ in model.entries()}
    if opt is not None:
        named.update(opt.state_arrays())
        step_count = opt.step_count
    else:
        step_count = 0
    config_blob = cfg.to_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<IQ", epoch, step_count))
        fh.write(struct.pack("<I", len(named)))
        for name, arr in named.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<H", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def checkpoint_load(path) -> Checkpoint:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    with fh:
        magic = _read_exact(fh, 4)
        if magic != _MAGIC:
            raise CheckpointError(f"not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config_text = _read_exact(fh, blob_len).decode("utf-8")
        epoch, step_count = struct.unpack("<IQ", _read_exact(fh, 12))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<H", _read_exact(fh, 2))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            n_values = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read_exact(fh, 8 * n_values), dtype="<f8")
            tensors[name] = np.ascontiguousarray(arr).reshape(shape)
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    try:
        cfg = config_from_text(config_text).validated()
    except ConfigError as e:
        raise CheckpointError(f"checkpoint carries an invalid config: {e}") from None
    return Checkpoint(version=version, config_text=config_text, cfg=cfg,
                      epoch=epoch, step_count=step_count, tensors=tensors)


def restore_model(ck: Checkpoint, cfg: RunConfig | None = None):
    """Rebuild (model, optimizer) from a checkpoint.

    The model is shaped by `cfg` when given (else the checkpoint's embedded
    config); every stored tensor must match, and mismatches name the tensor.
    """
    cfg = ck.cfg if cfg is None else cfg
    model = init_model(cfg)
    opt = Adam(model.entries(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    expected = {name: t for name, t, _ in model.entries()}
    expected_names = set(expected)
    for name in expected_names:
        if name not in ck.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
    for name, t in expected.items():
        arr = ck.tensors[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"tensor {name}: expected shape {t.data.shape}, found {arr.shape}"
            )
        t.data = arr.astype(np.float64, copy=True)
    moments = {}
    for name, arr in ck.tensors.items():
        if name.startswith("opt.m.") or name.startswith("opt.v."):
            if name[6:] not in expected_names:
                raise CheckpointError(f"checkpoint has unexpected tensor {name}")
            moments[name] = arr
        elif name not in expected_names:
            raise CheckpointError(f"checkpoint has unexpected tensor {name}")
    if moments:
        if len(moments) != 2 * len(expected_names):
            raise CheckpointError("checkpoint optimizer state is incomplete")
        try:
            opt.load_state_arrays(moments, ck.step_count)
        except ValueError as e:
            raise CheckpointError(str(e)) from None
    return model, opt


# ---------------------------------------------------------------------------
# ablation harness


def ablate(cfg: RunConfig, rows=None, dataset: GzslDataset | None = None):
    """Train and evaluate one model per toggle row on a shared dataset.

    Every row sweeps the configured tau grid and reports its best-H point,
    so architecture and calibration are not conflated. Returns (csv_lines,
    reports) with the toggle columns first, matching the component table.
    """
    cfg.validated()
    rows = ABLATION_ROWS if rows is None else rows
    ds = resolve_dataset(cfg, dataset)
    lines = [ABLATION_HEADER]
    reports = []
    for toggles in rows:
        row_cfg = replace(cfg, **toggles).validated()
        result = train(row_cfg, dataset=ds)
        row_reports, best_tau = sweep_tau(result.model, row_cfg, ds)
        best = max(row_reports, key=lambda r: r.h)
        reports.append(best)
        flags = ",".join(
            "1" if toggles[k] else "0"
            for k in ("pv", "ps", "wvpf", "wspf", "svpf", "sspf", "adapter")
        )
        lines.append(f"{flags},{repr(best.tau)},{repr(best.u)},{repr(best.s)},{repr(best.h)}")
    return lines, reports
