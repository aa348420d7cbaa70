"""Linear latency/failure model of a worker node.

Per function, warm execution time is modelled as

    exec_ms = b0 + b1 * in_flight + b2 * payload_KiB + b3 * utilization + noise

with Gaussian noise of standard deviation ``sigma_ms``. Cold starts add a
constant ``cold_extra_ms`` and failures are Bernoulli with ``failure_rate``.
"""

from __future__ import annotations

import json
import logging
import os
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from faastree.emulator.trace import TraceRecord
from faastree.errors import InsufficientData, NotFound

log = logging.getLogger(__name__)

MODEL_VERSION = "linear-ols-1"
MIN_WARM_SAMPLES = 10
MIN_FAILURE_SAMPLES = 50
FEATURES = ("intercept", "inflight", "payload_kib", "utilization")


@dataclass(frozen=True)
class FunctionModel:
    beta: tuple[float, float, float, float]
    sigma_ms: float = 0.0
    cold_extra_ms: float = 0.0
    failure_rate: float = 0.0
    n_samples: int = 0
    low_sample_warning: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.beta) != len(FEATURES):
            raise ValueError(f"beta needs {len(FEATURES)} coefficients")
        if self.sigma_ms < 0 or self.cold_extra_ms < 0:
            raise ValueError("sigma_ms and cold_extra_ms must be non-negative")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError("failure_rate must be within [0, 1]")

    def mean_ms(self, inflight: float, payload_bytes: float, utilization: float) -> float:
        b0, b1, b2, b3 = self.beta
        return max(0.0, b0 + b1 * inflight + b2 * payload_bytes / 1024.0 + b3 * utilization)


@dataclass
class WorkerModel:
    functions: dict[str, FunctionModel] = field(default_factory=dict)
    model_version: str = MODEL_VERSION

    def get(self, function: str) -> FunctionModel:
        try:
            return self.functions[function]
        except KeyError:
            raise NotFound(f"model does not cover function {function!r}") from None

    def to_dict(self) -> dict:
        return {
            "model_version": self.model_version,
            "functions": {name: {**asdict(fm), "beta": list(fm.beta)} for name, fm in sorted(self.functions.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> WorkerModel:
        if not isinstance(data, dict) or not isinstance(data.get("functions", {}), dict):
            raise ValueError("model file must be an object with a 'functions' mapping")
        return cls(
            functions={name: FunctionModel(**fm) for name, fm in data.get("functions", {}).items()},
            model_version=data.get("model_version", MODEL_VERSION),
        )

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> WorkerModel:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def constant(cls, latencies_ms: dict[str, float], **kwargs) -> WorkerModel:
        """Noise-free model with a fixed latency per function (handy for experiments)."""
        return cls({name: FunctionModel((ms, 0.0, 0.0, 0.0), **kwargs) for name, ms in latencies_ms.items()})


# -- fitting -------------------------------------------------------------------


def design_matrix(records: Sequence[TraceRecord]) -> np.ndarray:
    return np.array(
        [[1.0, r.inflight_at_admit, r.payload_bytes / 1024.0, r.utilization] for r in records],
        dtype=float,
    )


def independent_columns(x: np.ndarray, rtol: float = 1e-9) -> list[int]:
    """Indices of columns kept when collinear ones are dropped right to left.

    Columns are admitted left to right and skipped when they do not raise the
    rank, so in any dependent set the rightmost member goes.
    """
    norms = np.linalg.norm(x, axis=0)
    kept: list[int] = []
    for j in range(x.shape[1]):
        if norms[j] == 0.0:
            continue
        trial = x[:, kept + [j]] / norms[kept + [j]]
        s = np.linalg.svd(trial, compute_uv=False)
        if s[-1] > rtol * s[0] * max(trial.shape):
            kept.append(j)
    return kept


def ols(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Least squares with collinear columns zeroed. Returns (beta, residual sd)."""
    kept = independent_columns(x)
    beta = np.zeros(x.shape[1])
    if kept:
        sol, *_ = np.linalg.lstsq(x[:, kept], y, rcond=None)
        beta[kept] = sol
    resid = y - x @ beta
    dof = len(y) - len(kept)
    sigma = float(np.sqrt(resid @ resid / dof)) if dof > 0 else 0.0
    return beta, sigma


def fit_function(function: str, records: Sequence[TraceRecord]) -> FunctionModel:
    warm = [r for r in records if r.success and not r.cold_start]
    if len(warm) < MIN_WARM_SAMPLES:
        raise InsufficientData(
            function, f"{len(warm)} successful warm records, need at least {MIN_WARM_SAMPLES}"
        )
    y = np.array([r.exec_ms for r in warm], dtype=float)
    beta, sigma = ols(design_matrix(warm), y)

    cold = [r.exec_ms for r in records if r.success and r.cold_start]
    cold_extra = max(0.0, float(np.mean(cold)) - float(np.mean(y))) if cold else 0.0

    total = len(records)
    failures = sum(not r.success for r in records)
    low_sample = total < MIN_FAILURE_SAMPLES
    if low_sample:
        log.warning("%s: only %d records, failure rate not estimated", function, total)
    return FunctionModel(
        beta=tuple(beta),
        sigma_ms=sigma,
        cold_extra_ms=cold_extra,
        failure_rate=0.0 if low_sample else failures / total,
        n_samples=total,
        low_sample_warning=low_sample,
    )


def fit_model(trace: Iterable[TraceRecord], functions: Iterable[str] | None = None) -> WorkerModel:
    """Fit one linear model per function.

    Without an explicit ``functions`` list, every function with at least one
    successful record is fitted; functions that only ever failed (for example
    because they were never registered) are left out.
    """
    by_function: dict[str, list[TraceRecord]] = defaultdict(list)
    for rec in trace:
        by_function[rec.function].append(rec)
    if functions is None:
        names = sorted(f for f, recs in by_function.items() if any(r.success for r in recs))
        skipped = sorted(set(by_function) - set(names))
        if skipped:
            log.warning("no successful calls for %s; not modelled", ", ".join(skipped))
    else:
        names = list(functions)
    return WorkerModel({name: fit_function(name, by_function.get(name, [])) for name in names})


# -- sampling ------------------------------------------------------------------

Sampler = Callable[[FunctionModel, float, random.Random], float]


def gaussian_noise(fm: FunctionModel, mean_ms: float, rng: random.Random) -> float:
    return mean_ms + rng.gauss(0.0, fm.sigma_ms)


def emulate_invoke(
    model: WorkerModel,
    function: str,
    payload_bytes: int,
    inflight: int,
    utilization: float,
    cold: bool,
    rng: random.Random,
    sampler: Sampler = gaussian_noise,
) -> tuple[float, bool]:
    """Draw (latency_ms, success) for one call. Deterministic for a seeded rng."""
    fm = model.get(function)
    latency = sampler(fm, fm.mean_ms(inflight, payload_bytes, utilization), rng)
    if cold:
        latency += fm.cold_extra_ms
    success = rng.random() >= fm.failure_rate
    return max(0.0, latency), success
