import pytest

from weightflow.config import get_settings, load_settings, override_settings, reset_settings
from weightflow.errors import InputError


def test_defaults(tmp_path):
    settings = load_settings(tmp_path / "missing.env", environ={})
    assert settings.max_lattice_elements == 100_000
    assert settings.max_depth == 8
    assert settings.bootstrap == 200
    assert settings.threads > 0


def test_env_file(tmp_path):
    env = tmp_path / ".env"
    env.write_text("WF_MAX_DEPTH=3\nWF_RTOL=1e-6\nOTHER=1\n")
    settings = load_settings(env, environ={})
    assert settings.max_depth == 3
    assert settings.rtol == 1e-6


def test_environment_wins(tmp_path):
    env = tmp_path / ".env"
    env.write_text("WF_SEED=1\n")
    settings = load_settings(env, environ={"WF_SEED": "7", "WF_UNKNOWN": "x"})
    assert settings.seed == 7


def test_invalid_value(tmp_path):
    with pytest.raises(InputError):
        load_settings(tmp_path / "missing.env", environ={"WF_SAMPLES": "1"})


def test_override_ignores_none():
    before = get_settings()
    after = override_settings(threads=None, seed=5)
    assert after.seed == 5
    assert after.threads == before.threads
    assert get_settings() is after


def test_override_rejects_bad_values():
    with pytest.raises(InputError):
        override_settings(threads=0)


def test_reset():
    overridden = override_settings(seed=11)
    reset_settings()
    assert get_settings() is not overridden
