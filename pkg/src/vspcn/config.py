"""Run configuration: defaults, validation, and the flat key=value file format.

The same canonical text rendering is embedded verbatim in checkpoints, so
formatting here must round-trip exactly: field order is declaration order,
floats are rendered with repr, booleans as true/false.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass
class RunConfig:
    # model dimensions
    dim: int = 64              # token width D
    heads: int = 4             # backbone attention heads; must divide dim
    depth: int = 8             # number of transformer blocks M
    split_layer: int = 4       # blocks [0, split) run plain; [split, depth) add strong fusion
    grid: int = 4              # patch grid side; n_v = grid*grid tokens
    patch_dim: int = 8         # raw values per patch
    mlp_ratio: int = 4         # block MLP hidden width = dim * mlp_ratio

    # synthetic data generator
    n_seen: int = 8
    n_unseen: int = 4
    n_attributes: int = 16
    train_per_class: int = 20
    test_per_class: int = 10
    noise: float = 0.1         # pixel noise scale on top of the attribute rendering
    active_attributes: int = 0  # attributes active per class; 0 -> max(1, n_attributes//4)
    data_path: str = ""        # load a .vspd dataset instead of synthesizing

    # prompt fusion mixing weights, each clamped to [0, 1]
    alpha_v: float = 0.05
    alpha_s: float = 0.8
    alpha_a: float = 0.5

    # component toggles
    pv: bool = True            # visual prompt token participates in attention
    ps: bool = True            # semantic prompt token participates in attention
    wvpf: bool = True          # weak visual fusion at input (requires pv)
    wspf: bool = True          # weak semantic fusion at input (requires ps)
    svpf: bool = True          # strong visual fusion in deep layers (requires pv)
    sspf: bool = True          # strong semantic fusion in deep layers (requires ps)
    adapter: bool = True       # per-layer attribute adaptation feeding sspf

    # loss weights
    gamma: float = 1.0
    eta1: float = 1.0
    eta2: float = 1.0
    lambda_ced: float = 0.8
    lambda_skd: float = 0.9
    eps_kl: float = 1e-8       # floor under the KL denominator inside the divergence term
    kl_on_logits: bool = False  # divergence KL over classifier logits instead of raw tokens

    # optimization
    lr: float = 0.001
    weight_decay: float = 0.0001
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    precision: str = "float64"  # float32 is an opt-in speed mode; gradient checks need float64

    # evaluation
    tau: float = 0.0           # calibration added to unseen-class scores
    tau_min: float = -1.0
    tau_max: float = 1.0
    tau_steps: int = 41
    macro_average: bool = True  # per-class accuracy averaging; false = plain sample accuracy

    @property
    def n_v(self) -> int:
        return self.grid * self.grid

    @property
    def n_classes(self) -> int:
        return self.n_seen + self.n_unseen

    @property
    def mlp_hidden(self) -> int:
        return self.dim * self.mlp_ratio

    @property
    def k_active(self) -> int:
        if self.active_attributes > 0:
            return self.active_attributes
        return max(1, self.n_attributes // 4)

    def validated(self) -> "RunConfig":
        """Clamp the alpha weights and check every invariant; returns self."""
        for name in ("alpha_v", "alpha_s", "alpha_a"):
            v = getattr(self, name)
            setattr(self, name, min(max(v, 0.0), 1.0))

        def need(cond: bool, msg: str):
            if not cond:
                raise ConfigError(msg)

        need(self.dim >= 1, f"dim must be >= 1, got {self.dim}")
        need(self.heads >= 1, f"heads must be >= 1, got {self.heads}")
        need(self.dim % self.heads == 0,
             f"heads must divide dim: dim={self.dim}, heads={self.heads}")
        need(self.depth >= 1, f"depth must be >= 1, got {self.depth}")
        need(0 <= self.split_layer <= self.depth,
             f"split_layer must lie in [0, depth={self.depth}], got {self.split_layer}")
        need(self.grid >= 1, f"grid must be >= 1, got {self.grid}")
        need(self.patch_dim >= 1, f"patch_dim must be >= 1, got {self.patch_dim}")
        need(self.mlp_ratio >= 1, f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        need(self.n_seen >= 1, f"n_seen must be >= 1, got {self.n_seen}")
        need(self.n_unseen >= 1, f"n_unseen must be >= 1, got {self.n_unseen}")
        need(self.n_attributes >= 1, f"n_attributes must be >= 1, got {self.n_attributes}")
        need(self.train_per_class >= 1,
             f"train_per_class must be >= 1, got {self.train_per_class}")
        need(self.test_per_class >= 1,
             f"test_per_class must be >= 1, got {self.test_per_class}")
        need(self.noise >= 0.0, f"noise must be >= 0, got {self.noise}")
        need(0 <= self.active_attributes <= self.n_attributes,
             f"active_attributes must lie in [0, n_attributes], got {self.active_attributes}")
        for name in ("gamma", "eta1", "eta2", "lambda_ced", "lambda_skd"):
            need(getattr(self, name) >= 0.0, f"{name} must be >= 0")
        need(self.eps_kl > 0.0, f"eps_kl must be > 0, got {self.eps_kl}")
        need(self.lr > 0.0, f"lr must be > 0, got {self.lr}")
        need(self.weight_decay >= 0.0, f"weight_decay must be >= 0, got {self.weight_decay}")
        need(self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}")
        need(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}")
        need(self.tau_steps >= 1, f"tau_steps must be >= 1, got {self.tau_steps}")
        need(self.tau_min <= self.tau_max,
             f"tau_min must not exceed tau_max: [{self.tau_min}, {self.tau_max}]")
        need(self.precision in ("float64", "float32"),
             f"precision must be float64 or float32, got {self.precision!r}")
        need(self.pv or not self.wvpf, "wvpf requires pv")
        need(self.pv or not self.svpf, "svpf requires pv")
        need(self.ps or not self.wspf, "wspf requires ps")
        need(self.ps or not self.sspf, "sspf requires ps")
        return self

    def to_text(self) -> str:
        """Canonical key=value rendering; stable byte-for-byte per config."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "bool" or isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, float):
                s = repr(v)
            else:
                s = str(v)
            lines.append(f"{f.name}={s}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key: str, raw: str, where: str = ""):
    """Parse one raw string into the declared type of config field `key`."""
    ftype = _FIELD_TYPES.get(key)
    if ftype is None:
        raise ConfigError(f"unknown config key {key!r}{where}")
    raw = raw.strip()
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw, 10)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key {key!r}{where}") from None


def parse_config_text(text: str) -> dict:
    """Parse flat key=value lines; blank lines and #-comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        out[key] = parse_value(key, raw, where=f" (line {lineno})")
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    return parse_config_text(text)


def config_from_text(text: str) -> RunConfig:
    return apply_overrides(RunConfig(), parse_config_text(text))


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    return dataclasses.replace(cfg, **overrides)
