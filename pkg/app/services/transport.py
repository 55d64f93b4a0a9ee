"""
Discrete optimal transport between weighted point clouds.

Exact solver: network simplex on the bipartite transportation graph
(northwest-corner start, u/v potentials, stepping-stone pivots), with a
linear-assignment fast path for uniform square problems.
Entropic solver: log-domain Sinkhorn and the debiased Sinkhorn divergence.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from app.errors import (
    DimensionMismatchError,
    EmptyInputError,
    InfeasibleWeightsError,
    InputError,
    NonFiniteError,
    SolverError,
)

logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12
MARGINAL_TOL = 1e-9
EXACT_METHODS = ("auto", "simplex", "assignment")


def as_points(points):
    """Coerces array-like input to an (n, d) float array; 1-D input is n points of dimension 1."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InputError(f"Points must be a 2-D array, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise EmptyInputError("Point list is empty")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("Point coordinates must be finite")
    return arr


def _as_weights(weights, size):
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != size:
        raise DimensionMismatchError(f"Expected {size} weights, got {w.shape[0]}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InputError("Weights must be finite and nonnegative")
    return w


def _is_uniform(w):
    return bool(np.all(np.abs(w - 1.0 / len(w)) <= WEIGHT_TOL))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Discrete measure sum_i w_i delta_{x_i}."""
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = as_points(self.points)
        weights = _as_weights(self.weights, points.shape[0])
        if abs(math.fsum(weights) - 1.0) > WEIGHT_TOL:
            raise InputError(f"Weights must sum to 1, got {math.fsum(weights)!r}")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, points):
        pts = as_points(points)
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def is_uniform(self):
        return _is_uniform(self.weights)


def as_cloud(cloud):
    return cloud if isinstance(cloud, PointCloud) else PointCloud.uniform(cloud)


@dataclass(frozen=True, eq=False)
class CostMatrix:
    entries: np.ndarray
    order: float = 2.0

    @property
    def shape(self):
        return self.entries.shape


@dataclass(frozen=True, eq=False)
class TransportPlan:
    plan: np.ndarray
    value: float


@dataclass(frozen=True, eq=False)
class SinkhornResult:
    plan: np.ndarray
    value: float
    f: np.ndarray
    g: np.ndarray
    iterations: int
    converged: bool
    transport_cost: float


def cost_matrix(xs, ys, p=2.0):
    """Entries ||x_i - y_j||^p under the Euclidean ground metric."""
    if p < 1:
        raise InputError(f"Order p must be >= 1, got {p}")
    xs = xs.points if isinstance(xs, PointCloud) else as_points(xs)
    ys = ys.points if isinstance(ys, PointCloud) else as_points(ys)
    if xs.shape[1] != ys.shape[1]:
        raise DimensionMismatchError(f"Dimension mismatch: {xs.shape[1]} vs {ys.shape[1]}")
    sq = np.sum((xs[:, None, :] - ys[None, :, :]) ** 2, axis=-1)
    entries = sq if p == 2 else np.sqrt(sq) ** p
    return CostMatrix(entries=entries, order=float(p))


def _entries(cost):
    C = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=float)
    if C.ndim != 2 or C.size == 0:
        raise EmptyInputError("Cost matrix must be a nonempty 2-D array")
    if not np.all(np.isfinite(C)):
        raise NonFiniteError("Cost matrix entries must be finite")
    return C


def transport_cost(plan, cost):
    """sum_ij D_ij pi_ij, summed with compensation."""
    return math.fsum((_entries(cost) * np.asarray(plan, dtype=float)).ravel())


def _check_marginals(plan, a, b):
    row_err = float(np.max(np.abs(plan.sum(axis=1) - a)))
    col_err = float(np.max(np.abs(plan.sum(axis=0) - b)))
    if row_err > MARGINAL_TOL or col_err > MARGINAL_TOL:
        raise SolverError(f"Plan violates marginals (rows {row_err:.2e}, cols {col_err:.2e})")


def _northwest_corner(a, b):
    # Staircase of exactly m+n-1 cells: a spanning tree of the bipartite graph,
    # zero-flow cells included so degenerate starts stay trees.
    m, n = len(a), len(b)
    supply, demand = a.copy(), b.copy()
    plan = np.zeros((m, n))
    basis = []
    i = j = 0
    while True:
        q = max(min(supply[i], demand[j]), 0.0)
        plan[i, j] = q
        basis.append((i, j))
        supply[i] -= q
        demand[j] -= q
        if i == m - 1 and j == n - 1:
            break
        if j == n - 1:
            i += 1
        elif i == m - 1:
            j += 1
        elif supply[i] <= demand[j]:
            i += 1
        else:
            j += 1
    return plan, basis


def _tree_adjacency(basis, m, n):
    # Rows are nodes 0..m-1, columns are nodes m..m+n-1.
    adj = [[] for _ in range(m + n)]
    for k, (i, j) in enumerate(basis):
        adj[i].append((m + j, k))
        adj[m + j].append((i, k))
    return adj


def _potentials(C, basis, adj, m, n):
    u = np.zeros(m)
    v = np.zeros(n)
    seen = [False] * (m + n)
    seen[0] = True
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nxt, k in adj[node]:
            if seen[nxt]:
                continue
            i, j = basis[k]
            if nxt >= m:
                v[j] = C[i, j] - u[i]
            else:
                u[i] = C[i, j] - v[j]
            seen[nxt] = True
            queue.append(nxt)
    if not all(seen):
        raise SolverError("Basis is not a spanning tree")
    return u, v


def _tree_path(adj, start, target):
    """Basis edges on the tree path, listed from target back to start."""
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == target:
            break
        for nxt, k in adj[node]:
            if nxt not in parent:
                parent[nxt] = (node, k)
                queue.append(nxt)
    path = []
    node = target
    while parent[node] is not None:
        prev, k = parent[node]
        path.append(k)
        node = prev
    return path


def _network_simplex(C, a, b, max_iter=None):
    m, n = C.shape
    plan, basis = _northwest_corner(a, b)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(C))))
    if max_iter is None:
        max_iter = 50 * m * n + 1000
    degenerate_run = 0

    for iteration in range(max_iter):
        adj = _tree_adjacency(basis, m, n)
        u, v = _potentials(C, basis, adj, m, n)
        reduced = (C - u[:, None] - v[None, :]).ravel()

        # Dantzig pricing; Bland's rule once degenerate pivots pile up (anti-cycling).
        bland = degenerate_run > m + n
        if bland:
            candidates = np.flatnonzero(reduced < -tol)
            if candidates.size == 0:
                logger.debug("Network simplex optimal after %d pivots", iteration)
                return plan
            entering = int(candidates[0])
        else:
            entering = int(np.argmin(reduced))
            if reduced[entering] >= -tol:
                logger.debug("Network simplex optimal after %d pivots", iteration)
                return plan
        ie, je = divmod(entering, n)

        # Cycle = entering cell (+) then the tree path from column je back to row ie (-, +, -, ...).
        path = _tree_path(adj, ie, m + je)
        minus, plus = path[0::2], path[1::2]
        leaving = min(minus, key=lambda k: (plan[basis[k]], basis[k][0] * n + basis[k][1]))
        theta = plan[basis[leaving]]
        degenerate_run = degenerate_run + 1 if theta <= 0.0 else 0

        for k in plus:
            plan[basis[k]] += theta
        for k in minus:
            plan[basis[k]] = max(plan[basis[k]] - theta, 0.0)
        plan[basis[leaving]] = 0.0
        plan[ie, je] = theta
        basis[leaving] = (ie, je)

    raise SolverError(f"Network simplex did not converge within {max_iter} pivots")


def solve_exact(cost, wx, wy, method="auto", max_iter=None):
    """
    Solves min <D, pi> over couplings of wx and wy.

    method: "simplex" (network simplex, any weights), "assignment" (uniform
    weights with m == n, exact by Birkhoff extremality) or "auto".
    Only the optimal value is contractual; any optimal vertex may be returned.
    """
    C = _entries(cost)
    m, n = C.shape
    a = _as_weights(wx, m)
    b = _as_weights(wy, n)
    gap = abs(math.fsum(a) - math.fsum(b))
    if gap > MARGINAL_TOL:
        raise InfeasibleWeightsError(f"Weight totals differ by {gap:.3e}")
    if method not in EXACT_METHODS:
        raise InputError(f"Unknown exact method '{method}', expected one of {EXACT_METHODS}")

    uniform_square = m == n and _is_uniform(a) and _is_uniform(b)
    if method == "auto":
        method = "assignment" if uniform_square else "simplex"

    if m == 1 or n == 1:
        # Forced coupling.
        plan = np.outer(a, b) / (math.fsum(b) if m == 1 else math.fsum(a))
    elif method == "assignment":
        if not uniform_square:
            raise InputError("Assignment method requires uniform weights and m == n")
        rows, cols = linear_sum_assignment(C)
        plan = np.zeros((m, n))
        plan[rows, cols] = a[rows]
    else:
        plan = _network_simplex(C, a, b, max_iter=max_iter)

    _check_marginals(plan, a, b)
    value = max(transport_cost(plan, C), 0.0)
    return TransportPlan(plan=plan, value=value)


def wasserstein_power(a, b, p=2.0, method="auto"):
    """W_p(a, b)^p, i.e. the optimal transport value itself."""
    a, b = as_cloud(a), as_cloud(b)
    if a.dim != b.dim:
        raise DimensionMismatchError(f"Dimension mismatch: {a.dim} vs {b.dim}")
    return solve_exact(cost_matrix(a.points, b.points, p), a.weights, b.weights, method=method).value


def wasserstein_p(a, b, p=2.0, method="auto"):
    return wasserstein_power(a, b, p, method=method) ** (1.0 / p)


def wasserstein_1d_sorted(a, b, p=2.0):
    """Order-statistics matching; optimal for equal-size uniform samples on the line."""
    if p < 1:
        raise InputError(f"Order p must be >= 1, got {p}")
    clouds = [as_cloud(c) for c in (a, b)]
    for cloud in clouds:
        if cloud.dim != 1:
            raise DimensionMismatchError(f"Sorted matching needs dimension 1, got {cloud.dim}")
        if not cloud.is_uniform:
            raise InputError("Sorted matching needs uniform weights")
    xa, xb = (np.sort(c.points[:, 0]) for c in clouds)
    if xa.shape[0] != xb.shape[0]:
        raise DimensionMismatchError(f"Size mismatch: {xa.shape[0]} vs {xb.shape[0]}")
    value = math.fsum(np.abs(xa - xb) ** p) / xa.shape[0]
    return value ** (1.0 / p)


EPSILON_SCALING_FACTOR = 0.5


def _sinkhorn_loop(C, loga, logb, epsilon, g, tol, max_iter):
    a = np.exp(loga)
    for iterations in range(1, max_iter + 1):
        f = -epsilon * logsumexp((g[None, :] - C) / epsilon + logb[None, :], axis=1)
        g = -epsilon * logsumexp((f[:, None] - C) / epsilon + loga[:, None], axis=0)
        log_plan = (f[:, None] + g[None, :] - C) / epsilon + loga[:, None] + logb[None, :]
        plan = np.exp(log_plan)
        if float(np.abs(plan.sum(axis=1) - a).sum()) < tol:
            return f, g, plan, iterations, True
    return f, g, plan, max_iter, False


def _epsilon_schedule(C, epsilon):
    """Geometric decrease from the cost scale down to epsilon, which comes last."""
    schedule = []
    eps = float(C.max()) if C.size else epsilon
    while eps > epsilon:
        schedule.append(eps)
        eps *= EPSILON_SCALING_FACTOR
    schedule.append(epsilon)
    return schedule


def solve_sinkhorn(cost, wx, wy, epsilon, tol=1e-9, max_iter=10000, epsilon_scaling=False, warm_start=None):
    """
    Entropic OT in the log domain:
        min <D, pi> + epsilon * KL(pi | wx (x) wy)
    with pi_ij = wx_i wy_j exp((f_i + g_j - D_ij) / epsilon).
    Stops once the L1 row-marginal violation drops below tol. Running out of
    iterations is reported through `converged`, not raised.

    `warm_start` is an (f, g) pair, e.g. from an earlier result; the first
    half-step recomputes f from g. With
    `epsilon_scaling`, epsilon is lowered geometrically from max(D) and each
    stage starts from the potentials of the previous one; small epsilon
    then needs far fewer iterations. Off by default.
    """
    if epsilon <= 0:
        raise InputError(f"epsilon must be positive, got {epsilon}")
    if tol <= 0:
        raise InputError(f"tol must be positive, got {tol}")
    if max_iter < 1:
        raise InputError(f"max_iter must be >= 1, got {max_iter}")
    C = _entries(cost)
    m, n = C.shape
    a = _as_weights(wx, m)
    b = _as_weights(wy, n)
    gap = abs(math.fsum(a) - math.fsum(b))
    if gap > MARGINAL_TOL:
        raise InfeasibleWeightsError(f"Weight totals differ by {gap:.3e}")

    with np.errstate(divide="ignore"):
        loga, logb = np.log(a), np.log(b)
    g = np.zeros(n)
    if warm_start is not None:
        g = np.asarray(warm_start[1], dtype=float)
        if g.shape != (n,) or not np.all(np.isfinite(g)):
            raise InputError(f"warm_start potentials must be finite with g of shape ({n},)")
    schedule = _epsilon_schedule(C, epsilon) if epsilon_scaling else [epsilon]
    iterations = 0
    for eps in schedule:
        f, g, plan, used, converged = _sinkhorn_loop(C, loga, logb, eps, g, tol, max_iter)
        iterations += used
        logger.debug("Sinkhorn stage epsilon=%g: %d iterations, converged=%s", eps, used, converged)
    if not converged:
        logger.warning("Sinkhorn stopped after %d iterations without reaching tol=%g (epsilon=%g)",
                       iterations, tol, epsilon)

    support = np.outer(a, b) > 0
    log_ratio = np.where(support, (f[:, None] + g[None, :] - C) / epsilon, 0.0)
    kl = math.fsum((plan * log_ratio).ravel()) - math.fsum(plan.ravel()) + 1.0
    cost_term = transport_cost(plan, C)
    value = cost_term + epsilon * kl
    if not math.isfinite(value):
        raise SolverError("Sinkhorn produced a non-finite objective")
    return SinkhornResult(plan=plan, value=value, f=f, g=g, iterations=iterations,
                          converged=converged, transport_cost=cost_term)


def entropic_value(a, b, epsilon, p=2.0, tol=1e-9, max_iter=10000, epsilon_scaling=False):
    a, b = as_cloud(a), as_cloud(b)
    return solve_sinkhorn(cost_matrix(a.points, b.points, p), a.weights, b.weights,
                          epsilon, tol=tol, max_iter=max_iter, epsilon_scaling=epsilon_scaling).value


def sinkhorn_divergence(a, b, epsilon, p=2.0, tol=1e-9, max_iter=10000, epsilon_scaling=False):
    """W_eps(a, b) - (W_eps(a, a) + W_eps(b, b)) / 2; zero when a == b."""
    a, b = as_cloud(a), as_cloud(b)
    cross = entropic_value(a, b, epsilon, p, tol, max_iter, epsilon_scaling)
    self_a = entropic_value(a, a, epsilon, p, tol, max_iter, epsilon_scaling)
    self_b = entropic_value(b, b, epsilon, p, tol, max_iter, epsilon_scaling)
    return cross - 0.5 * (self_a + self_b)
