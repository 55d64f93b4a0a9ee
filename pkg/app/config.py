import logging
import os
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from app.errors import InputError

load_dotenv()

logger = logging.getLogger(__name__)

ENV_PREFIX = "ITD_"


class Settings(BaseModel):
    """
    Run defaults for the experiment harness and the distributed protocol.
    Desk-scale values; the full-scale run is m=n=250, Bk=100, B=1000 (data/grids/type1_full.json).
    """
    seed: int = Field(default=20240101, description="Root seed every other seed is derived from.")
    alpha: float = Field(default=0.05, gt=0, lt=1, description="Test significance level.")
    K: int = Field(default=5, ge=1, description="Number of selected clients.")
    d: int = Field(default=2, ge=1, description="Dimension of the samples.")
    m: int = Field(default=100, ge=1, description="Sample size drawn from P^k.")
    n: int = Field(default=100, ge=1, description="Sample size drawn from Q^k.")
    Bk: int = Field(default=50, ge=1, description="Permuted statistics computed per client.")
    B: int = Field(default=500, ge=1, description="Permuted ITD values drawn by the coordinator.")
    reps: int = Field(default=200, ge=1, description="Monte Carlo replications per grid cell.")
    dist: Literal["normal", "lognormal", "t5"] = "normal"
    model: Literal["A", "B", "C", "D"] = "A"
    transport: Literal["loopback", "socket"] = "loopback"
    out: str = Field(default="data/output", description="Directory for CSV and JSON reports.")
    workers: int = Field(default=1, ge=1, description="Worker processes for replications.")
    timeout: float = Field(default=30.0, gt=0, description="Seconds to wait for each client reply.")
    log_level: str = "INFO"


def _env_overrides():
    overrides = {}
    for name in Settings.model_fields:
        value = os.getenv(f"{ENV_PREFIX}{name.upper()}")
        if value is not None and value.strip():
            overrides[name] = value.strip()
    return overrides


def get_settings(**overrides):
    """
    Builds Settings from the environment (ITD_* variables, .env honoured),
    then applies explicit overrides such as parsed CLI flags.
    Overrides equal to None are ignored. An invalid ITD_* variable is logged
    and dropped on its own; an invalid override raises InputError.
    """
    values = _env_overrides()
    try:
        Settings(**values)
    except ValidationError as e:
        bad = {err["loc"][0] for err in e.errors() if err["loc"]}
        logger.warning("Ignoring invalid %s: %s",
                       ", ".join(f"{ENV_PREFIX}{name.upper()}" for name in sorted(bad)), e)
        values = {k: v for k, v in values.items() if k not in bad}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return Settings(**values)
    except ValidationError as e:
        raise InputError(f"Invalid settings: {e}")
