"""Config dataclass, key=value parsing, and validation invariants."""

import pytest

from vspcn.config import (
    RunConfig,
    apply_overrides,
    config_from_text,
    load_config_file,
    parse_config_text,
    parse_value,
)
from vspcn.errors import ConfigError


def test_defaults_validate():
    cfg = RunConfig().validated()
    assert cfg.dim == 64 and cfg.heads == 4 and cfg.depth == 8
    assert cfg.n_v == cfg.grid ** 2
    assert cfg.n_classes == cfg.n_seen + cfg.n_unseen
    assert cfg.mlp_hidden == cfg.dim * cfg.mlp_ratio


def test_k_active_defaults_to_quarter_of_attributes():
    assert RunConfig(n_attributes=16).k_active == 4
    assert RunConfig(n_attributes=2).k_active == 1  # floors at 1
    assert RunConfig(n_attributes=16, active_attributes=5).k_active == 5


def test_to_text_round_trips_through_parser():
    cfg = RunConfig(dim=16, heads=2, alpha_v=0.125, pv=False, wvpf=False,
                    svpf=False, noise=0.25, seed=42)
    back = config_from_text(cfg.to_text())
    assert back == cfg
    # and the rendering itself is a fixed point
    assert back.to_text() == cfg.to_text()


def test_to_text_is_byte_stable():
    assert RunConfig().to_text() == RunConfig().to_text()
    text = RunConfig().to_text()
    assert "dim=64" in text and "precision=float64" in text
    assert "pv=true" in text and "macro_average=true" in text


def test_parse_value_types():
    assert parse_value("dim", " 32 ") == 32
    assert parse_value("noise", "0.5") == 0.5
    assert parse_value("noise", "2") == 2.0
    assert parse_value("pv", "true") is True
    assert parse_value("pv", "FALSE") is False
    assert parse_value("precision", "float32") == "float32"
    assert parse_value("data_path", "some/file.vspd") == "some/file.vspd"


def test_parse_value_errors_name_key_and_site():
    with pytest.raises(ConfigError, match="unknown config key 'bogus'"):
        parse_value("bogus", "1")
    with pytest.raises(ConfigError, match=r"bad value 'abc' for config key 'dim' \(line 3\)"):
        parse_value("dim", "abc", where=" (line 3)")
    with pytest.raises(ConfigError, match="bad value"):
        parse_value("pv", "maybe")
    with pytest.raises(ConfigError, match="bad value"):
        parse_value("dim", "1.5")


def test_parse_config_text_comments_and_blanks():
    text = "# leading comment\n\ndim=16\n  heads = 2  \n\n# tail\n"
    assert parse_config_text(text) == {"dim": 16, "heads": 2}


def test_parse_config_text_line_numbers():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("dim=16\nnot a pair\n")
    with pytest.raises(ConfigError, match=r"\(line 3\)"):
        parse_config_text("dim=16\n\nheads=x\n")


def test_load_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("dim=8\nheads=2\nnoise=0.3\n", encoding="utf-8")
    assert load_config_file(p) == {"dim": 8, "heads": 2, "noise": 0.3}
    with pytest.raises(ConfigError, match="cannot read"):
        load_config_file(tmp_path / "absent.cfg")


def test_apply_overrides_returns_new_config():
    base = RunConfig()
    out = apply_overrides(base, {"dim": 16, "heads": 2})
    assert out.dim == 16 and base.dim == 64


def test_validated_clamps_alphas():
    cfg = RunConfig(alpha_v=-0.5, alpha_s=1.5, alpha_a=0.25).validated()
    assert cfg.alpha_v == 0.0 and cfg.alpha_s == 1.0 and cfg.alpha_a == 0.25


@pytest.mark.parametrize("bad", [
    dict(dim=0),
    dict(heads=0),
    dict(dim=10, heads=4),
    dict(depth=0),
    dict(split_layer=9),
    dict(grid=0),
    dict(patch_dim=0),
    dict(mlp_ratio=0),
    dict(n_seen=0),
    dict(n_unseen=0),
    dict(n_attributes=0),
    dict(train_per_class=0),
    dict(test_per_class=0),
    dict(noise=-0.1),
    dict(active_attributes=99),
    dict(gamma=-1.0),
    dict(lambda_ced=-0.1),
    dict(eps_kl=0.0),
    dict(lr=0.0),
    dict(weight_decay=-1e-9),
    dict(epochs=-1),
    dict(batch_size=0),
    dict(tau_steps=0),
    dict(tau_min=1.0, tau_max=-1.0),
    dict(precision="float16"),
])
def test_validated_rejects_out_of_range(bad):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), bad).validated()


@pytest.mark.parametrize("bad", [
    dict(pv=False, wvpf=True, svpf=False),
    dict(pv=False, svpf=True, wvpf=False),
    dict(ps=False, wspf=True, sspf=False),
    dict(ps=False, sspf=True, wspf=False),
])
def test_validated_enforces_toggle_dependencies(bad):
    with pytest.raises(ConfigError, match="requires"):
        apply_overrides(RunConfig(), bad).validated()


def test_split_layer_boundaries_allowed():
    RunConfig(split_layer=0).validated()          # every layer is deep
    RunConfig(split_layer=8, depth=8).validated() # no deep layers at all
