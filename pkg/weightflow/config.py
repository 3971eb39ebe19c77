import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import InputError

ENV_PREFIX = "WF_"


def default_env_file() -> Path:
    return Path.cwd() / ".env"


class Settings(BaseModel):
    """Caps and tolerances shared by the computation modules."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    loglevel: str = "INFO"
    max_lattice_elements: int = Field(100_000, gt=0)
    max_tuples: int = Field(200_000, gt=0)
    max_condition_tuples: int = Field(1_000_000, gt=0)
    descent_max_iter: int = Field(10_000, gt=0)
    max_depth: int = Field(8, ge=0)
    rtol: float = Field(1e-9, gt=0)
    atol: float = Field(1e-12, gt=0)
    samples: int = Field(200, ge=2)
    bootstrap: int = Field(200, ge=0)
    threads: int = Field(default_factory=lambda: os.cpu_count() or 4, gt=0)
    seed: int = 0


def _strip_prefix(env: Mapping[str, Optional[str]]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in env.items():
        if value is None or not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name in Settings.model_fields:
            out[name] = value
    return out


def load_settings(
    env_file: str | Path | None = None,
    environ: Mapping[str, Optional[str]] | None = None,
) -> Settings:
    """Defaults, then `.env`, then the process environment."""
    values: Dict[str, Any] = {}
    path = Path(env_file) if env_file else default_env_file()
    if path.exists():
        values.update(_strip_prefix(dotenv_values(path)))
    values.update(_strip_prefix(os.environ if environ is None else environ))
    try:
        return Settings(**values)
    except ValidationError as e:
        raise InputError("invalid WF_* setting: {}".format(e)) from e


_current: Optional[Settings] = None


def get_settings() -> Settings:
    global _current
    if _current is None:
        _current = load_settings()
    return _current


def override_settings(**changes) -> Settings:
    """Replace settings for the rest of the process; None values are ignored."""
    global _current
    values = get_settings().model_dump()
    values.update({k: v for k, v in changes.items() if v is not None})
    try:
        _current = Settings(**values)
    except ValidationError as e:
        raise InputError("invalid setting: {}".format(e)) from e
    return _current


def reset_settings() -> None:
    global _current
    _current = None
