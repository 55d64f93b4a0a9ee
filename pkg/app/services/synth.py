"""
Seeded data generators: the simulation design (Distributions normal /
lognormal / t5 crossed with Models A-D), a synthetic mixture-drift analogue
of the digit experiment, and per-client CSV ingestion for real data.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from app.errors import InputError
from app.services.kernel_distance import ClientSample
from app.services.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

T_DF = 5


class ModelKind(str, Enum):
    A = "A"  # same mean, same variance
    B = "B"  # same mean, different variance
    C = "C"  # different mean, same variance
    D = "D"  # different mean, different variance


class Distribution(str, Enum):
    NORMAL = "normal"
    LOGNORMAL = "lognormal"
    T5 = "t5"


class ModelConfig(BaseModel):
    model: ModelKind = ModelKind.A
    dist: Distribution = Distribution.NORMAL
    K: int = Field(default=5, ge=1)
    d: int = Field(default=2, ge=1)
    m: int = Field(default=100, ge=1)
    n: int = Field(default=100, ge=1)
    shift_sd: float = Field(default=0.25, ge=0, description="Standard deviation of the mean and scale shifts.")
    seed: int = 0


class DriftConfig(BaseModel):
    K: int = Field(default=10, ge=1)
    epsilon: float = Field(default=0.8, ge=0, le=1, description="Probability a y-point comes from the client's own component.")
    m: int = Field(default=100, ge=1, description="Points per side (m = n).")
    d: int = Field(default=2, ge=1)
    radius: float = Field(default=1.5, ge=0, description="Component means sit on a circle of this radius.")
    sd: float = Field(default=1.0, gt=0)
    means: Optional[list[list[float]]] = Field(default=None, description="Explicit component means, one per client.")
    seed: int = 0

    @model_validator(mode="after")
    def _check_means(self):
        if self.means is not None:
            if len(self.means) != self.K or any(len(mu) != self.d for mu in self.means):
                raise ValueError(f"means must be a {self.K} x {self.d} list")
        return self


@dataclass(frozen=True, eq=False)
class ClientParameters:
    client_id: str
    u: np.ndarray
    r: np.ndarray
    mean_y: np.ndarray
    scale_y: np.ndarray
    mean_shift: np.ndarray
    scale_shift: np.ndarray


def client_id_for(k):
    return f"c{k}"


def draw_client_parameters(cfg):
    """
    Per-client u_k ~ U(-1, 1)^d, r_k ~ U(0.8, 1.2)^d and shifts ~ N(0, shift_sd^2)^d.
    Shifts are always drawn so every model consumes the same stream; the model
    decides which of them reach the Y side. Negative scales are reflected.
    """
    rng = make_rng(derive_seed(cfg.seed, "params"))
    params = []
    for k in range(cfg.K):
        u = rng.uniform(-1.0, 1.0, cfg.d)
        r = rng.uniform(0.8, 1.2, cfg.d)
        scale_shift = rng.normal(0.0, cfg.shift_sd, cfg.d)
        mean_shift = rng.normal(0.0, cfg.shift_sd, cfg.d)
        mean_y = u + mean_shift if cfg.model in (ModelKind.C, ModelKind.D) else u.copy()
        scale_y = np.abs(r + scale_shift) if cfg.model in (ModelKind.B, ModelKind.D) else r.copy()
        params.append(ClientParameters(client_id_for(k), u, r, mean_y, scale_y, mean_shift, scale_shift))
    return params


def _draw(rng, dist, mean, scale, size):
    z = rng.standard_normal((size, mean.shape[0]))
    if dist == Distribution.T5:
        # Multivariate t: Gaussian scaled by sqrt(df / chi2_df), one mixing draw per point.
        z *= np.sqrt(T_DF / rng.chisquare(T_DF, size))[:, None]
    x = mean + scale * z
    if dist == Distribution.LOGNORMAL:
        x = np.exp(x)
    return x


def sample_model(cfg):
    """K ClientSamples following the configured model and distribution."""
    clients = []
    for k, prm in enumerate(draw_client_parameters(cfg)):
        rng = make_rng(derive_seed(cfg.seed, "sample", k))
        xs = _draw(rng, cfg.dist, prm.u, prm.r, cfg.m)
        ys = _draw(rng, cfg.dist, prm.mean_y, prm.scale_y, cfg.n)
        clients.append(ClientSample.from_arrays(prm.client_id, xs, ys))
    return clients


def component_means(cfg):
    if cfg.means is not None:
        return np.asarray(cfg.means, dtype=float)
    means = np.zeros((cfg.K, cfg.d))
    if cfg.d == 1:
        means[:, 0] = cfg.radius * (np.linspace(-1.0, 1.0, cfg.K) if cfg.K > 1 else 0.0)
    else:
        angles = 2.0 * np.pi * np.arange(cfg.K) / cfg.K
        means[:, 0] = cfg.radius * np.cos(angles)
        means[:, 1] = cfg.radius * np.sin(angles)
    return means


def sample_drift(cfg):
    """
    Client k: xs from its own Gaussian component; each y-point comes from the
    own component with probability epsilon, otherwise from the global mixture
    (a uniformly chosen component, possibly the own one).
    """
    means = component_means(cfg)
    clients = []
    for k in range(cfg.K):
        rng = make_rng(derive_seed(cfg.seed, "drift", k))
        xs = means[k] + cfg.sd * rng.standard_normal((cfg.m, cfg.d))
        own = rng.random(cfg.m) < cfg.epsilon
        components = np.where(own, k, rng.integers(0, cfg.K, cfg.m))
        ys = means[components] + cfg.sd * rng.standard_normal((cfg.m, cfg.d))
        clients.append(ClientSample.from_arrays(client_id_for(k), xs, ys))
    return clients


def load_clients_csv(directory):
    """
    Loads `<client>_x.csv` / `<client>_y.csv` pairs (header row, one point per
    line) from a directory, sorted by client id.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Client data directory not found: {directory}")
    clients = []
    for x_path in sorted(directory.glob("*_x.csv")):
        client_id = x_path.name[: -len("_x.csv")]
        y_path = directory / f"{client_id}_y.csv"
        if not y_path.exists():
            raise InputError(f"Missing {y_path.name} for client {client_id}")
        xs = pd.read_csv(x_path, float_precision="round_trip").to_numpy(dtype=float)
        ys = pd.read_csv(y_path, float_precision="round_trip").to_numpy(dtype=float)
        clients.append(ClientSample.from_arrays(client_id, xs, ys))
    if not clients:
        raise InputError(f"No *_x.csv files in {directory}")
    logger.info("Loaded %d clients from %s", len(clients), directory)
    return clients


def write_clients_csv(clients, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for c in clients:
        columns = [f"x{i}" for i in range(c.dim)]
        pd.DataFrame(c.xs.points, columns=columns).to_csv(directory / f"{c.client_id}_x.csv", index=False)
        pd.DataFrame(c.ys.points, columns=columns).to_csv(directory / f"{c.client_id}_y.csv", index=False)
    return directory
