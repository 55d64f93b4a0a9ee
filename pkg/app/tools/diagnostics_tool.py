"""
Monte Carlo diagnostics for the asymptotic results: consistency of the
empirical ITD^2 in K, the Gaussian limit of sqrt(K)(ITD^2_K - ITD^2), and the
large-deviation bound.

The consistency and CLT checks use a kernel with closed-form per-client
W_2: client x ~ U(0, 1), P^x = N(a x, (1 + b x)^2), Q^x = N(0, 1), so
W_2^2(P^x, Q^x) = (a^2 + b^2) x^2 and every moment is known exactly.
"""
import json
import logging
import math
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, Field
from scipy import stats

import app
from app.errors import InputError
from app.services.kernel_distance import (
    ClientSample,
    clt_variance,
    concentration_bound,
    empirical_itd2,
    equal_weights,
)
from app.services.seeding import derive_seed, make_rng
from app.services.synth import client_id_for
from app.tools.experiment_tool import run_replications

logger = logging.getLogger(__name__)

CLT_KS_MAX = 0.10
CLT_VARIANCE_BAND = (0.7, 1.3)

# --- Input Schemas ---


class GaussianKernel(BaseModel):
    mean_slope: float = Field(default=1.0, description="a in P^x = N(a x, (1 + b x)^2).")
    sd_slope: float = Field(default=0.5, ge=0, description="b in P^x = N(a x, (1 + b x)^2).")

    @property
    def c(self):
        return self.mean_slope ** 2 + self.sd_slope ** 2

    def client_values(self, x):
        """Exact W_2^2(P^x, Q^x) for client labels x."""
        return self.c * np.asarray(x, dtype=float) ** 2

    @property
    def mean(self):
        # E[x^2] = 1/3 for x ~ U(0, 1)
        return self.c / 3.0

    @property
    def variance(self):
        # Var[x^2] = 1/5 - 1/9
        return self.c ** 2 * 4.0 / 45.0


class CLTConfig(BaseModel):
    K_values: list[int] = Field(default_factory=lambda: [1, 50, 500], min_length=1)
    replications: int = Field(default=500, ge=2)
    kernel: GaussianKernel = Field(default_factory=GaussianKernel)
    seed: int = 20240101


class ConcentrationConfig(BaseModel):
    K: int = Field(default=5, ge=1)
    d: int = Field(default=2, ge=1)
    m: int = Field(default=100, ge=1)
    n: int = Field(default=100, ge=1)
    replications: int = Field(default=1000, ge=2)
    t_values: list[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2], min_length=1)
    dist: Literal["uniform", "normal", "lognormal", "t5"] = Field(
        default="uniform", description="Only bounded-support data has finite Dx, Dy.")
    seed: int = 20240101
    workers: int = Field(default=1, ge=1)


class ConsistencyConfig(BaseModel):
    K_small: int = Field(default=50, ge=1)
    K_large: int = Field(default=2000, ge=1)
    trials: int = Field(default=100, ge=1)
    kernel: GaussianKernel = Field(default_factory=GaussianKernel)
    seed: int = 20240101


class DiagnosticReport(BaseModel):
    check: str
    rows: list[dict[str, Any]]
    passed: bool
    metadata: dict[str, Any] = Field(default_factory=dict)

    def to_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.model_dump(), indent=2, default=float) + "\n")
        return path

    def render(self):
        header = list(self.rows[0]) if self.rows else []
        lines = ["  ".join(f"{h:>14}" for h in header)]
        for row in self.rows:
            lines.append("  ".join(f"{_fmt(row[h]):>14}" for h in header))
        return "\n".join(lines)


def _fmt(value):
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


# --- CLT ---


def run_clt_check(cfg):
    """
    For each K: KS distance between the standardized sqrt(K)(ITD^2_K - ITD^2)
    and N(0, 1), and the ratio of the mean plug-in clt_variance to the
    empirical variance of sqrt(K) ITD^2_K. K = 1 is skipped.
    """
    kernel = cfg.kernel
    rows = []
    for K in cfg.K_values:
        if K < 2:
            rows.append({"K": K, "replications": cfg.replications, "ks_distance": None,
                         "variance_ratio": None, "passed": None,
                         "note": "skipped: a single client gives no averaging"})
            continue
        rng = make_rng(derive_seed(cfg.seed, "clt", K))
        w = equal_weights(K)
        z = np.empty(cfg.replications)
        plug_in = np.empty(cfg.replications)
        for r in range(cfg.replications):
            values = kernel.client_values(rng.uniform(0.0, 1.0, K))
            itd2 = math.fsum(w.weights * values)
            z[r] = math.sqrt(K) * (itd2 - kernel.mean)
            plug_in[r] = clt_variance(values, w, itd2)
        ks = float(stats.kstest(z / math.sqrt(kernel.variance), "norm").statistic)
        ratio = float(plug_in.mean() / np.var(z, ddof=1))
        passed = ks <= CLT_KS_MAX and CLT_VARIANCE_BAND[0] <= ratio <= CLT_VARIANCE_BAND[1]
        rows.append({"K": K, "replications": cfg.replications, "ks_distance": ks,
                     "variance_ratio": ratio, "passed": passed, "note": ""})
        logger.info("CLT K=%d: KS %.4f, variance ratio %.3f", K, ks, ratio)
    checked = [row["passed"] for row in rows if row["passed"] is not None]
    return DiagnosticReport(check="clt", rows=rows, passed=all(checked),
                            metadata={"seed": cfg.seed, "version": app.__version__,
                                      "predicted_variance": kernel.variance})


# --- Concentration ---


def _concentration_replication(job):
    cfg, rep_seed = job
    rng = make_rng(rep_seed)
    clients = [ClientSample.from_arrays(client_id_for(k), rng.uniform(0.0, 1.0, (cfg.m, cfg.d)),
                                        rng.uniform(0.0, 1.0, (cfg.n, cfg.d)))
               for k in range(cfg.K)]
    return empirical_itd2(clients, equal_weights(cfg.K)).value


def run_concentration_check(cfg):
    """
    Empirical P(ITD^2 - E ITD^2 > t) over the replications against the bound,
    on uniform [0, 1]^d data where Dx = Dy = d. PASS at t iff
    empirical <= bound + 2 MC-sd.
    """
    if cfg.dist != "uniform":
        raise InputError(f"The concentration bound needs bounded support; '{cfg.dist}' is unbounded")
    jobs = [(cfg, derive_seed(cfg.seed, "concentration", r)) for r in range(cfg.replications)]
    values = np.asarray(run_replications(_concentration_replication, jobs, cfg.workers))
    centered = values - values.mean()
    D = float(cfg.d)
    rows = []
    for t in cfg.t_values:
        tail = float(np.mean(centered > t))
        mc_sd = math.sqrt(tail * (1.0 - tail) / cfg.replications)
        bound = concentration_bound(cfg.K, cfg.m, cfg.n, D, D, t)
        rows.append({"t": float(t), "empirical_tail": tail, "bound": bound, "mc_sd": mc_sd,
                     "passed": tail <= bound + 2.0 * mc_sd})
    return DiagnosticReport(check="concentration", rows=rows, passed=all(r["passed"] for r in rows),
                            metadata={"seed": cfg.seed, "version": app.__version__, "K": cfg.K, "d": cfg.d,
                                      "m": cfg.m, "n": cfg.n, "mean_itd2": float(values.mean())})


# --- Consistency ---


def expected_closer_fraction(K_small, K_large):
    """P(|e_large| < |e_small|) for independent centered Gaussian errors with sd ~ 1/sqrt(K)."""
    return 1.0 - 2.0 / math.pi * math.atan(math.sqrt(K_small / K_large))


def run_consistency_check(cfg):
    """
    Fraction of trials where ITD^2 over K_large sampled clients is closer to
    the exact value than ITD^2 over K_small clients. The gate is the fraction
    expected from the Gaussian limit, less three binomial standard deviations.
    """
    if cfg.K_large <= cfg.K_small:
        raise InputError(f"K_large ({cfg.K_large}) must exceed K_small ({cfg.K_small})")
    kernel = cfg.kernel
    rng = make_rng(derive_seed(cfg.seed, "consistency"))
    closer = 0
    small_err, large_err = [], []
    for _ in range(cfg.trials):
        e_small = abs(float(np.mean(kernel.client_values(rng.uniform(0.0, 1.0, cfg.K_small)))) - kernel.mean)
        e_large = abs(float(np.mean(kernel.client_values(rng.uniform(0.0, 1.0, cfg.K_large)))) - kernel.mean)
        small_err.append(e_small)
        large_err.append(e_large)
        closer += e_large < e_small
    fraction = closer / cfg.trials
    expected = expected_closer_fraction(cfg.K_small, cfg.K_large)
    gate = expected - 3.0 * math.sqrt(expected * (1.0 - expected) / cfg.trials)
    row = {"K_small": cfg.K_small, "K_large": cfg.K_large, "trials": cfg.trials,
           "fraction_closer": fraction, "expected": expected, "gate": gate,
           "mean_error_small": float(np.mean(small_err)), "mean_error_large": float(np.mean(large_err))}
    return DiagnosticReport(check="consistency", rows=[row], passed=fraction >= gate,
                            metadata={"seed": cfg.seed, "version": app.__version__, "itd2": kernel.mean})
