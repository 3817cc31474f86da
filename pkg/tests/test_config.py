import math

import pytest
from hypothesis import given, strategies as st

from backaction.config import ConfigError, RunConfig, load_config
from backaction.protocols import ProtocolKind


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.kind is ProtocolKind.DIFFUSION_GRADIENT
    assert cfg.control.kmax == pytest.approx(math.pi**2)
    assert cfg.noise.is_zero


def test_text_round_trip_is_exact():
    cfg = RunConfig(kappa=0.1 + 0.2, dt=1.0 / 3.0, seed=17, boundary="interval", out="x y")
    assert RunConfig.from_text(cfg.to_text()) == cfg


@given(st.floats(1e-6, 1e3), st.floats(0, 10), st.integers(0, 2**62))
def test_round_trip_property(kappa, gamma, seed):
    cfg = RunConfig(kappa=kappa, gamma=gamma, seed=seed)
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_comments_and_blank_lines():
    cfg = RunConfig.from_text("# header\n\nkappa = 2.0  # trailing\nensemble=5\n")
    assert cfg.kappa == 2.0 and cfg.ensemble == 5


@pytest.mark.parametrize("text", ["kappa 2", "nonsense = 1", "ensemble = many", "dt = nan"])
def test_malformed_text(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


@pytest.mark.parametrize("field, value, fragment", [
    ("horizon", 1e-4, "horizon"),
    ("dt", 0.0, "dt"),
    ("gamma", -1.0, "gamma"),
    ("ensemble", 0, "ensemble"),
    ("nlevel_dim", 9, "nlevel_dim"),
    ("boundary", "square", "boundary"),
    ("protocol", "magic", "protocol"),
    ("burn_in", 5.0, "burn_in"),
])
def test_validation_names_the_bound(field, value, fragment):
    with pytest.raises(ConfigError, match=fragment):
        RunConfig(**{field: value}).validate()


def test_environment_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\nensemble = 10\n")
    cfg = load_config(str(path), environ={"BACKACTION_SEED": "5", "BACKACTION_GAMMA": "0.1"})
    assert cfg.seed == 5 and cfg.gamma == 0.1 and cfg.ensemble == 10
    cfg = load_config(str(path), environ={"BACKACTION_SEED": "5"}, overrides={"seed": 9,
                                                                                "out": None})
    assert cfg.seed == 9 and cfg.out == "out"


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.cfg", environ={})
