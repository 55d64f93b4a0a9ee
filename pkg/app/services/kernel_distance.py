"""
Integrated transportation distance (ITD) over a weighted set of clients,
client weights, and the quantities behind the CLT and concentration checks.

The sampling measure over clients is only ever represented empirically:
the selected ClientSamples together with a ClientWeightVector.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel

from app.errors import DimensionMismatchError, EmptyInputError, InputError
from app.services.transport import (
    PointCloud,
    as_cloud,
    sinkhorn_divergence,
    wasserstein_power,
)
from app.wire import WireFloat

logger = logging.getLogger(__name__)

SOLVERS = ("exact", "sinkhorn")


@dataclass(frozen=True, eq=False)
class ClientSample:
    """One client's pair of samples: xs from P^k (size m), ys from Q^k (size n)."""
    client_id: str
    xs: PointCloud
    ys: PointCloud

    def __post_init__(self):
        xs, ys = as_cloud(self.xs), as_cloud(self.ys)
        if not (xs.is_uniform and ys.is_uniform):
            raise InputError(f"Client {self.client_id}: samples must carry uniform weights")
        if xs.dim != ys.dim:
            raise DimensionMismatchError(f"Client {self.client_id}: dimension {xs.dim} vs {ys.dim}")
        object.__setattr__(self, "client_id", str(self.client_id))
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @classmethod
    def from_arrays(cls, client_id, xs, ys):
        return cls(str(client_id), PointCloud.uniform(xs), PointCloud.uniform(ys))

    @property
    def m(self):
        return self.xs.size

    @property
    def n(self):
        return self.ys.size

    @property
    def dim(self):
        return self.xs.dim

    def pooled(self):
        """Pooled sample z_1..z_{m+n}: xs first, then ys."""
        return np.vstack([self.xs.points, self.ys.points])


@dataclass(frozen=True, eq=False)
class ClientWeightVector:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.size == 0:
            raise EmptyInputError("Client weight vector is empty")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise InputError("Client weights must be positive and finite")
        if abs(math.fsum(w) - 1.0) > 1e-12:
            raise InputError(f"Client weights must sum to 1, got {math.fsum(w)!r}")
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size

    def tolist(self):
        return [float(x) for x in self.weights]


def weight_array(weights, size=None):
    """Plain weight array from a ClientWeightVector or a sequence (zeros allowed)."""
    w = weights.weights if isinstance(weights, ClientWeightVector) else np.asarray(weights, dtype=float).reshape(-1)
    if size is not None and w.size != size:
        raise DimensionMismatchError(f"Expected {size} weights, got {w.size}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InputError("Weights must be finite and nonnegative")
    return w


def client_weights(m_sizes, n_sizes):
    """omega_k = m_k / (2M) + n_k / (2N), renormalized so the sum is 1."""
    m_sizes = np.asarray(m_sizes, dtype=float).reshape(-1)
    n_sizes = np.asarray(n_sizes, dtype=float).reshape(-1)
    if m_sizes.size == 0 or n_sizes.size == 0:
        raise EmptyInputError("Client list is empty")
    if m_sizes.size != n_sizes.size:
        raise DimensionMismatchError(f"{m_sizes.size} m-sizes vs {n_sizes.size} n-sizes")
    if np.any(m_sizes < 1) or np.any(n_sizes < 1):
        raise InputError("Every client needs at least one point on each side")
    omega = m_sizes / (2.0 * m_sizes.sum()) + n_sizes / (2.0 * n_sizes.sum())
    return ClientWeightVector(omega / math.fsum(omega))


def equal_weights(K):
    if K < 1:
        raise EmptyInputError("Client list is empty")
    return ClientWeightVector(np.full(K, 1.0 / K))


def weights_for(clients, weighting="size"):
    """Weights for a client list: "size" (sample-size rule) or "equal"."""
    if weighting == "size":
        return client_weights([c.m for c in clients], [c.n for c in clients])
    if weighting == "equal":
        return equal_weights(len(clients))
    raise InputError(f"Unknown weighting '{weighting}'")


def itd_p(distances, weights, p=2.0):
    """(sum_k w_k W_p^p)^(1/p) from per-client W_p values."""
    d = np.asarray(distances, dtype=float).reshape(-1)
    w = weight_array(weights, d.size)
    if np.any(d < 0):
        raise InputError("Distances must be nonnegative")
    return math.fsum(w * d ** p) ** (1.0 / p)


class ClientValue(BaseModel):
    client_id: str
    value: WireFloat


class ITDStatistic(BaseModel):
    """sum_k w_k W_p(P_m^k, Q_n^k)^p; with p = 2 this is the test statistic ITD^2."""
    value: WireFloat
    order: WireFloat = 2.0
    per_client: list[ClientValue]
    weights: list[WireFloat]

    def recomputed(self):
        return math.fsum(w * c.value for w, c in zip(self.weights, self.per_client))


def client_statistic(client, p=2.0, solver="exact", epsilon=0.05, method="auto"):
    """
    W_p^p between a client's two samples, or the debiased Sinkhorn divergence.
    The Sinkhorn path always solves with epsilon scaling.
    """
    if solver == "exact":
        return wasserstein_power(client.xs, client.ys, p, method=method)
    if solver == "sinkhorn":
        return max(sinkhorn_divergence(client.xs, client.ys, epsilon, p, epsilon_scaling=True), 0.0)
    raise InputError(f"Unknown solver '{solver}', expected one of {SOLVERS}")


def empirical_itd(clients, weights=None, p=2.0, solver="exact", epsilon=0.05, method="auto"):
    if not clients:
        raise EmptyInputError("At least one client is required")
    if weights is None:
        weights = weights_for(clients)
    w = weight_array(weights, len(clients))
    values = [client_statistic(c, p, solver, epsilon, method) for c in clients]
    return aggregate_statistic([c.client_id for c in clients], values, w, p)


def empirical_itd2(clients, weights=None, solver="exact", epsilon=0.05, method="auto"):
    """Second-order empirical ITD: sum_k w_k W_2(P_m^k, Q_n^k)^2."""
    return empirical_itd(clients, weights, 2.0, solver, epsilon, method)


def aggregate_statistic(client_ids, values, weights, p=2.0):
    """Weighted reduction of per-client W_p^p values, independent of evaluation order up to rounding."""
    w = weight_array(weights, len(values))
    value = math.fsum(float(wk) * float(vk) for wk, vk in zip(w, values))
    return ITDStatistic(
        value=max(value, 0.0),
        order=float(p),
        per_client=[ClientValue(client_id=str(cid), value=float(v)) for cid, v in zip(client_ids, values)],
        weights=[float(x) for x in w],
    )


def clt_variance(per_client_values, weights, itd_value):
    """sum_k w_k (v_k - itd)^2: plug-in variance of the limiting Gaussian."""
    v = np.asarray(per_client_values, dtype=float).reshape(-1)
    w = weight_array(weights, v.size)
    return math.fsum(w * (v - itd_value) ** 2)


def concentration_bound(K, m, n, Dx, Dy, t):
    """exp(-K m n t^2 / (2 (m + n) (Dx + Dy)^2)): large-deviation bound for ITD^2 - E[ITD^2] > t."""
    if min(K, m, n) < 1:
        raise InputError("K, m and n must be positive")
    if Dx <= 0 or Dy <= 0:
        raise InputError("Dx and Dy must be positive")
    if t < 0:
        raise InputError("t must be nonnegative")
    return math.exp(-K * m * n * t ** 2 / (2.0 * (m + n) * (Dx + Dy) ** 2))


def max_squared_norm(points):
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float)
    return float(np.max(np.sum(np.atleast_2d(pts) ** 2, axis=1)))


def pooled_mixture(clients, weights, side="x"):
    """Mixture sum_k w_k P_m^k (side "x") or sum_k w_k Q_n^k (side "y") as one PointCloud."""
    if side not in ("x", "y"):
        raise InputError(f"side must be 'x' or 'y', got {side!r}")
    w = weight_array(weights, len(clients))
    clouds = [c.xs if side == "x" else c.ys for c in clients]
    points = np.vstack([cloud.points for cloud in clouds])
    mass = np.concatenate([wk * cloud.weights for wk, cloud in zip(w, clouds)])
    return PointCloud(points, mass / math.fsum(mass))
