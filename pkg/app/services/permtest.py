"""
Distributed permutation test for the ITD statistic.

Client side: permuted local statistics (pooled sample, random permutation,
first m vs remaining n). Coordinator side: random recombination of one
permuted statistic per client into B permuted ITD values, the critical value
and the decision. `itd_permutation_test` runs everything in-process and is the
reference a distributed run must reproduce.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from app.errors import EmptyInputError, InputError
from app.services.kernel_distance import (
    ClientSample,
    ITDStatistic,
    aggregate_statistic,
    client_statistic,
    weight_array,
    weights_for,
)
from app.services.seeding import derive_seed, make_rng
from app.wire import WireFloat

logger = logging.getLogger(__name__)

DEFAULT_BK = 100
DEFAULT_B = 1000


@dataclass(frozen=True, eq=False)
class PermutationBatch:
    client_id: str
    stats: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        stats = np.asarray(self.stats, dtype=float).reshape(-1)
        if stats.size == 0:
            raise EmptyInputError(f"Client {self.client_id}: empty permutation batch")
        if np.any(stats < 0) or not np.all(np.isfinite(stats)):
            raise InputError(f"Client {self.client_id}: permuted statistics must be finite and >= 0")
        object.__setattr__(self, "stats", stats)

    @property
    def B_k(self):
        return self.stats.size


@dataclass(frozen=True, eq=False)
class PermutedITDSample:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size == 0:
            raise EmptyInputError("Permuted ITD sample is empty")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise InputError("Permuted ITD values must be finite and >= 0")
        object.__setattr__(self, "values", values)

    @property
    def B(self):
        return self.values.size


class BatchSummary(BaseModel):
    client_id: str
    B_k: int
    mean: WireFloat
    sd: WireFloat
    minimum: WireFloat
    maximum: WireFloat
    observed: Optional[WireFloat] = None


class RunConfig(BaseModel):
    """Configuration echoed into every TestReport."""
    K: int
    m: list[int]
    n: list[int]
    B_k: int
    B: int
    seed: int
    order: WireFloat = 2.0
    solver: str = "exact"


class TestReport(BaseModel):
    __test__ = False  # not a pytest class

    observed: ITDStatistic
    critical_value: WireFloat
    p_value: WireFloat = Field(ge=0, le=1)
    alpha: WireFloat
    reject: bool
    per_client_batches: list[BatchSummary]
    config: RunConfig


def local_permuted_stats(client, B_k, rng, p=2.0, solver="exact", epsilon=0.05):
    """
    B_k statistics W_p^p between the first m and the last n entries of
    independent uniform permutations of the client's pooled sample.
    `rng` is a seed or a numpy Generator.
    """
    if B_k < 1:
        raise InputError(f"B_k must be >= 1, got {B_k}")
    seed = None if isinstance(rng, np.random.Generator) else rng
    rng = make_rng(rng)
    pooled = client.pooled()
    m = client.m
    stats = np.empty(B_k)
    for b in range(B_k):
        perm = rng.permutation(pooled.shape[0])
        split = ClientSample.from_arrays(client.client_id, pooled[perm[:m]], pooled[perm[m:]])
        stats[b] = client_statistic(split, p, solver, epsilon)
    logger.debug("Client %s: %d permuted statistics, mean %.4g", client.client_id, B_k, stats.mean())
    return PermutationBatch(client_id=client.client_id, stats=stats, seed=seed)


def aggregate_permuted_itd(batches, weights, B, rng):
    """
    B permuted ITD values: each is sum_k w_k * (uniform draw from batch k),
    draws independent across clients and across rounds (with replacement).
    """
    if B < 1:
        raise InputError(f"B must be >= 1, got {B}")
    if not batches:
        raise EmptyInputError("No permutation batches")
    w = weight_array(weights, len(batches))
    rng = make_rng(rng)
    values = np.zeros(B)
    for wk, batch in zip(w, batches):
        picks = rng.integers(0, batch.B_k, size=B)
        values += wk * batch.stats[picks]
    return PermutedITDSample(values=values)


def _critical(sample, alpha):
    if not 0 < alpha < 1:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    values = sample.values if isinstance(sample, PermutedITDSample) else PermutedITDSample(sample).values
    ordered = np.sort(values)
    B = ordered.size
    # Guard against (1 - alpha) * B landing a hair above an integer.
    need = math.ceil((1.0 - alpha) * B - 1e-9)
    below = np.searchsorted(ordered, ordered, side="left")
    qualifying = np.flatnonzero(below >= need)
    if qualifying.size:
        return float(ordered[qualifying[0]]), True
    return float(ordered[-1]), False


def critical_value(sample, alpha):
    """
    Smallest sample value z with #{values < z} >= ceil((1 - alpha) B).
    If no sample value qualifies (all values tied, or alpha below 1/B) the
    minimum over the reals is not attained; the largest value is returned and
    only observations strictly above it reject.
    """
    return _critical(sample, alpha)[0]


def rejects(observed, sample, alpha):
    c, attained = _critical(sample, alpha)
    return bool(observed >= c) if attained else bool(observed > c)


def p_value(sample, observed):
    """(1 + #{values >= observed}) / (B + 1)."""
    values = sample.values if isinstance(sample, PermutedITDSample) else PermutedITDSample(sample).values
    return (1.0 + float(np.count_nonzero(values >= observed))) / (values.size + 1.0)


def summarize_batch(batch, observed=None):
    return BatchSummary(
        client_id=batch.client_id,
        B_k=batch.B_k,
        mean=float(np.mean(batch.stats)),
        sd=float(np.std(batch.stats)),
        minimum=float(np.min(batch.stats)),
        maximum=float(np.max(batch.stats)),
        observed=observed,
    )


def decide(observed, sample, alpha, batches=(), config=None):
    """Reject iff observed ITD^2 >= critical value (strictly above it when the critical value is not attained)."""
    if not isinstance(sample, PermutedITDSample):
        sample = PermutedITDSample(sample)
    if isinstance(observed, (int, float)):
        observed = ITDStatistic(value=float(observed), per_client=[], weights=[])
    c = critical_value(sample, alpha)
    per_client = {cv.client_id: cv.value for cv in observed.per_client}
    if config is None:
        config = RunConfig(K=len(batches), m=[], n=[], B_k=max((b.B_k for b in batches), default=0),
                           B=sample.B, seed=0)
    return TestReport(
        observed=observed,
        critical_value=c,
        p_value=p_value(sample, observed.value),
        alpha=alpha,
        reject=rejects(observed.value, sample, alpha),
        per_client_batches=[summarize_batch(b, per_client.get(b.client_id)) for b in batches],
        config=config,
    )


def client_seed(seed, client_id):
    return derive_seed(seed, "client", client_id)


def aggregation_seed(seed):
    return derive_seed(seed, "aggregate")


def global_decision(observed, batches, weights, alpha, B, seed, config=None):
    """Coordinator Steps 7-9 from collected batches; batches must follow the client order of `observed`."""
    sample = aggregate_permuted_itd(batches, weights, B, aggregation_seed(seed))
    return decide(observed, sample, alpha, batches=batches, config=config)


def itd_permutation_test(clients, weights=None, alpha=0.05, B_k=DEFAULT_BK, B=DEFAULT_B, seed=0,
                         p=2.0, solver="exact", epsilon=0.05, weighting="size", keep_batches=False):
    """
    Full test in one process. Client k's permutations use
    client_seed(seed, client_id); the coordinator draws use aggregation_seed(seed).
    Returns the TestReport, plus the batches when keep_batches is set.
    """
    if not clients:
        raise EmptyInputError("At least one client is required")
    if weights is None:
        weights = weights_for(clients, weighting)
    w = weight_array(weights, len(clients))
    values = [client_statistic(c, p, solver, epsilon) for c in clients]
    observed = aggregate_statistic([c.client_id for c in clients], values, w, p)
    batches = [local_permuted_stats(c, B_k, client_seed(seed, c.client_id), p, solver, epsilon)
               for c in clients]
    config = RunConfig(K=len(clients), m=[c.m for c in clients], n=[c.n for c in clients],
                       B_k=B_k, B=B, seed=seed, order=float(p), solver=solver)
    report = global_decision(observed, batches, w, alpha, B, seed, config=config)
    logger.debug("ITD test: observed %.5g, critical %.5g, reject=%s",
                 report.observed.value, report.critical_value, report.reject)
    return (report, batches) if keep_batches else report


def client_level_tests(report, batches, alpha, B, seed):
    """
    Per-client tests reusing the batches of an ITD run: client k alone, weight 1.
    With K = 1 the single client test coincides with the ITD test.
    """
    observed = {cv.client_id: cv.value for cv in report.observed.per_client}
    results = []
    for k, batch in enumerate(batches):
        stat = aggregate_statistic([batch.client_id], [observed[batch.client_id]], [1.0], report.observed.order)
        config = report.config.model_copy(update={
            "K": 1, "m": report.config.m[k:k + 1], "n": report.config.n[k:k + 1]})
        results.append(global_decision(stat, [batch], [1.0], alpha, B, seed, config=config))
    return results
