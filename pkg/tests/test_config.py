"""Config parsing, overrides, and validation."""

import pytest

from fedsim.config import SimConfig, apply_overrides, load_config
from fedsim.errors import ConfigError


def test_defaults_are_valid():
    cfg = SimConfig()
    assert cfg.layer_dims == (32, 64, 10)
    assert cfg.malicious_ids == (0, 1, 2, 3, 4)


def test_text_roundtrip(tmp_path):
    cfg = SimConfig(seed=9, noniid_p=0.6, voting_metrics=("gradient",))
    path = tmp_path / "run.cfg"
    cfg.write(path)
    back = load_config(path)
    assert back == cfg


def test_load_with_comments_and_overrides(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(
        "# experiment\n"
        "rounds=5\n"
        "attack=basic   # poisoning on\n"
        "trigger_values=2.0;-2.0;2.0;-2.0\n"
        "\n"
    )
    cfg = load_config(path, {"seed": "3"})
    assert cfg.rounds == 5 and cfg.attack == "basic" and cfg.seed == 3
    assert cfg.trigger_values == (2.0, -2.0, 2.0, -2.0)


def test_override_types():
    cfg = SimConfig()
    out = apply_overrides(cfg, {
        "strict_paper_sign": "true",
        "hidden_dims": "32;16",
        "voting_metrics": "gradient",
        "selection_ratio": "0.5",
    })
    assert out.strict_paper_sign is True
    assert out.hidden_dims == (32, 16)
    assert out.voting_metrics == ("gradient",)
    assert out.selection_ratio == 0.5


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        apply_overrides(SimConfig(), {"turbo": "1"})


def test_bad_bool_rejected():
    with pytest.raises(ConfigError):
        apply_overrides(SimConfig(), {"strict_paper_sign": "maybe"})


def test_validation_bounds():
    with pytest.raises(ConfigError):
        SimConfig(selection_ratio=0.0)
    with pytest.raises(ConfigError):
        SimConfig(selection_ratio=0.02)  # fewer than two clients per round
    with pytest.raises(ConfigError):
        SimConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        SimConfig(noniid_p=1.5)
    with pytest.raises(ConfigError):
        SimConfig(voting_metrics=("accuracy",))
    with pytest.raises(ConfigError):
        SimConfig(num_malicious=99)


def test_malformed_file_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("rounds 5\n")
    with pytest.raises(ConfigError):
        load_config(path)
